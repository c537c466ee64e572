//! Synthetic topic-labeled corpora.
//!
//! The generator builds a small "world" of templates and topic vocabularies,
//! then renders question-answer pairs and two-speaker dialogues from it:
//!
//! * a question is `[topic words] head(j) keys tail(j)`, where `j` is a
//!   template, `keys` are 1..n entity symbols, and the topic words appear only
//!   in topical questions (QA questions and the first turn of a dialogue);
//! * the answer to template `j` under topic `k` is `prefix(k, j) keys
//!   closer(k)`: the prefix is topic-specific, so the same question has a
//!   different gold answer in every topic, and the keys are copied from the
//!   question;
//! * a dialogue alternates questions and answers. Follow-up questions use the
//!   successor template `next(j)` (shared by all topics) and carry no topic
//!   words, so the topic of their answer is only recoverable from earlier
//!   turns.
//!
//! Every symbol is a single character, so character-level tokenization is
//! exact. All randomness derives from `spec.seed`.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::loaders::{DialogueExample, LabelSet, QaExample};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

const ENTITY_SYMBOLS: &str = "0123456789";
const FUNCTION_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz";
const LATIN_CONTENT: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const CJK_BASE: u32 = 0x4E00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k_topics: usize,
    pub content_per_topic: usize,
    /// Fraction of each topic's content words shared with the next topic.
    pub overlap: f64,
    pub function_words: usize,
    pub entities: usize,
    pub templates: usize,
    /// Inclusive range of key symbols per question.
    pub keys: [usize; 2],
    pub topical_tokens: usize,
    pub prefix_len: usize,
    /// Inclusive range of template tail lengths.
    pub tail: [usize; 2],
    /// Probability that an answer is rendered in its long (> 30 symbol) form.
    pub long_fraction: f64,
    /// Probability of inserting one random function word into a topical question.
    pub noise_rate: f64,
    pub qa_train: usize,
    pub qa_test: usize,
    pub dialogues_train: usize,
    pub dialogues_test: usize,
    /// Inclusive range of turns per dialogue.
    pub turns: [usize; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            k_topics: 8,
            content_per_topic: 6,
            overlap: 0.0,
            function_words: 10,
            entities: 8,
            templates: 20,
            keys: [2, 4],
            topical_tokens: 2,
            prefix_len: 3,
            tail: [1, 3],
            long_fraction: 0.05,
            noise_rate: 0.1,
            qa_train: 2000,
            qa_test: 200,
            dialogues_train: 500,
            dialogues_test: 60,
            turns: [4, 6],
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.k_topics == 0 {
            return fail("k_topics must be positive".into());
        }
        if self.content_per_topic == 0 {
            return fail("topic vocabularies are empty (content_per_topic = 0)".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return fail(format!("overlap {} not in [0, 1)", self.overlap));
        }
        for (name, p) in [
            ("long_fraction", self.long_fraction),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} not in [0, 1]"));
            }
        }
        if self.entities == 0 || self.entities > ENTITY_SYMBOLS.len() {
            return fail(format!("entities must be in 1..={}", ENTITY_SYMBOLS.len()));
        }
        if self.function_words < 2 || self.function_words > FUNCTION_SYMBOLS.len() {
            return fail(format!(
                "function_words must be in 2..={}",
                FUNCTION_SYMBOLS.len()
            ));
        }
        for (name, [lo, hi]) in [
            ("keys", self.keys),
            ("tail", self.tail),
            ("turns", self.turns),
        ] {
            if lo > hi {
                return fail(format!("{name} range [{lo}, {hi}] is inverted"));
            }
        }
        if self.keys[0] == 0 {
            return fail("questions need at least one key".into());
        }
        if self.turns[0] < 2 {
            return fail("dialogues need at least two turns".into());
        }
        if self.templates == 0 || self.prefix_len == 0 {
            return fail("templates and prefix_len must be positive".into());
        }
        let heads = self.function_words.pow(2) as f64;
        let tails: f64 = (self.tail[0]..=self.tail[1])
            .map(|n| (self.function_words as f64).powi(n as i32))
            .sum();
        if heads * tails < self.templates as f64 {
            return fail("not enough function words for distinct templates".into());
        }
        if (self.content_per_topic as f64).powi(self.prefix_len as i32) < self.templates as f64 {
            return fail("topic vocabulary too small for distinct answer prefixes".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        crate::util::hex(&Sha256::digest(json.as_bytes()))
    }
}

/// The fixed tables a corpus is rendered from.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    entities: Vec<char>,
    function_words: Vec<char>,
    topic_vocab: Vec<Vec<char>>,
    heads: Vec<[char; 2]>,
    tails: Vec<Vec<char>>,
    prefixes: Vec<Vec<Vec<char>>>,
    closers: Vec<char>,
    successors: Vec<usize>,
}

fn content_symbol(i: usize) -> char {
    LATIN_CONTENT.chars().nth(i).unwrap_or_else(|| {
        char::from_u32(CJK_BASE + (i - LATIN_CONTENT.len()) as u32).expect("CJK range")
    })
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::substream(spec.seed, 1);
        let entities: Vec<char> = ENTITY_SYMBOLS.chars().take(spec.entities).collect();
        let function_words: Vec<char> =
            FUNCTION_SYMBOLS.chars().take(spec.function_words).collect();

        let c = spec.content_per_topic;
        let shared = ((spec.overlap * c as f64).round() as usize).min(c - 1);
        let stride = c - shared;
        let pool = spec.k_topics * stride;
        let topic_vocab: Vec<Vec<char>> = (0..spec.k_topics)
            .map(|k| {
                (0..c)
                    .map(|i| content_symbol((k * stride + i) % pool))
                    .collect()
            })
            .collect();

        let mut seen = HashSet::new();
        let mut heads = Vec::new();
        let mut tails = Vec::new();
        while heads.len() < spec.templates {
            let head = [*rng.choose(&function_words), *rng.choose(&function_words)];
            let n = rng.between(spec.tail[0], spec.tail[1]);
            let tail: Vec<char> = (0..n).map(|_| *rng.choose(&function_words)).collect();
            if seen.insert((head, tail.clone())) {
                heads.push(head);
                tails.push(tail);
            }
        }

        let mut used = HashSet::new();
        let mut prefixes = Vec::new();
        for vocab in &topic_vocab {
            let mut per_topic = Vec::new();
            while per_topic.len() < spec.templates {
                let p: Vec<char> = (0..spec.prefix_len).map(|_| *rng.choose(vocab)).collect();
                if used.insert(p.clone()) {
                    per_topic.push(p);
                }
            }
            prefixes.push(per_topic);
        }
        let closers = topic_vocab.iter().map(|v| *rng.choose(v)).collect();
        let mut successors: Vec<usize> = (0..spec.templates).collect();
        rng.shuffle(&mut successors);

        Ok(Self {
            spec: spec.clone(),
            entities,
            function_words,
            topic_vocab,
            heads,
            tails,
            prefixes,
            closers,
            successors,
        })
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet::topics(self.spec.k_topics)
    }

    pub fn topic_vocab(&self, k: usize) -> &[char] {
        &self.topic_vocab[k]
    }

    pub fn function_words(&self) -> &[char] {
        &self.function_words
    }

    pub fn entities(&self) -> &[char] {
        &self.entities
    }

    /// Topics whose content vocabulary contains `ch` (empty for shared symbols).
    pub fn topics_of(&self, ch: char) -> Vec<usize> {
        (0..self.spec.k_topics)
            .filter(|&k| self.topic_vocab[k].contains(&ch))
            .collect()
    }

    pub fn is_content(&self, ch: char) -> bool {
        self.topic_vocab.iter().any(|v| v.contains(&ch))
    }

    pub fn successor(&self, template: usize) -> usize {
        self.successors[template]
    }

    /// All symbols the world can emit.
    pub fn alphabet(&self) -> String {
        let mut all: BTreeSet<char> = BTreeSet::new();
        all.extend(&self.entities);
        all.extend(&self.function_words);
        all.extend(self.topic_vocab.iter().flatten());
        all.into_iter().collect()
    }

    pub fn random_keys(&self, rng: &mut SeededRng) -> Vec<char> {
        let n = rng.between(self.spec.keys[0], self.spec.keys[1]);
        (0..n).map(|_| *rng.choose(&self.entities)).collect()
    }

    /// `head keys tail`, optionally preceded by `topic_words`.
    pub fn question(&self, template: usize, keys: &[char], topic_words: &[char]) -> String {
        let mut s: String = topic_words.iter().collect();
        s.extend(self.heads[template]);
        s.extend(keys);
        s.extend(&self.tails[template]);
        s
    }

    /// Index of the first key symbol inside [`SyntheticWorld::question`].
    pub fn key_offset(&self, topic_words: usize) -> usize {
        topic_words + 2
    }

    pub fn topic_words(&self, topic: usize, rng: &mut SeededRng) -> Vec<char> {
        (0..self.spec.topical_tokens)
            .map(|_| *rng.choose(&self.topic_vocab[topic]))
            .collect()
    }

    pub fn answer(&self, topic: usize, template: usize, keys: &[char], long: bool) -> String {
        let prefix = &self.prefixes[topic][template];
        let mut s = String::new();
        let unit = prefix.len() + keys.len();
        let reps = if long { 31usize.div_ceil(unit) } else { 1 };
        for _ in 0..reps {
            s.extend(prefix);
            s.extend(keys);
        }
        s.push(self.closers[topic]);
        s
    }

    fn add_noise(&self, text: &str, rng: &mut SeededRng) -> String {
        if !rng.bernoulli(self.spec.noise_rate) {
            return text.to_string();
        }
        let mut chars: Vec<char> = text.chars().collect();
        let at = rng.below(chars.len() + 1);
        chars.insert(at, *rng.choose(&self.function_words));
        chars.into_iter().collect()
    }

    pub fn sample_qa(&self, rng: &mut SeededRng) -> QaExample {
        let topic = rng.below(self.spec.k_topics);
        let template = rng.below(self.spec.templates);
        let keys = self.random_keys(rng);
        let words = self.topic_words(topic, rng);
        let long = rng.bernoulli(self.spec.long_fraction);
        let question = self.add_noise(&self.question(template, &keys, &words), rng);
        QaExample {
            question,
            answer: self.answer(topic, template, &keys, long),
            label: topic,
        }
    }

    pub fn sample_dialogue(&self, rng: &mut SeededRng) -> (DialogueExample, usize) {
        let topic = rng.below(self.spec.k_topics);
        let mut template = rng.below(self.spec.templates);
        let keys = self.random_keys(rng);
        let n = rng.between(self.spec.turns[0], self.spec.turns[1]);
        let words = self.topic_words(topic, rng);
        let mut turns = vec![self.add_noise(&self.question(template, &keys, &words), rng)];
        while turns.len() < n {
            if turns.len() % 2 == 1 {
                let long = rng.bernoulli(self.spec.long_fraction);
                turns.push(self.answer(topic, template, &keys, long));
            } else {
                template = self.successor(template);
                turns.push(self.question(template, &keys, &[]));
            }
        }
        (DialogueExample { turns }, topic)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub qa_train: Vec<QaExample>,
    pub qa_test: Vec<QaExample>,
    pub dialogue_train: Vec<DialogueExample>,
    pub dialogue_test: Vec<DialogueExample>,
}

fn pair_keys(d: &DialogueExample) -> Vec<(String, String)> {
    (0..d.turns.len() - 1)
        .map(|i| {
            let context = if i == 0 {
                d.turns[0].clone()
            } else {
                format!("{}\u{241E}{}", d.turns[i], d.turns[i - 1])
            };
            (d.turns[i].clone(), context)
        })
        .collect()
}

/// Renders train and test corpora. Test items whose (source, context) pair
/// occurs in training are redrawn, so the splits are disjoint.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<(SyntheticWorld, SyntheticCorpus)> {
    let world = SyntheticWorld::new(spec)?;
    let mut rng = SeededRng::substream(spec.seed, 2);

    let qa_train: Vec<QaExample> = (0..spec.qa_train)
        .map(|_| world.sample_qa(&mut rng))
        .collect();
    let dialogue_train: Vec<DialogueExample> = (0..spec.dialogues_train)
        .map(|_| world.sample_dialogue(&mut rng).0)
        .collect();

    let mut train_keys: HashSet<(String, String)> = HashSet::new();
    for q in &qa_train {
        train_keys.insert((q.question.clone(), q.question.clone()));
    }
    for d in &dialogue_train {
        train_keys.extend(pair_keys(d));
    }

    let budget = 50 * (spec.qa_test + spec.dialogues_test) + 100;
    let mut attempts = 0;
    let mut qa_test = Vec::with_capacity(spec.qa_test);
    while qa_test.len() < spec.qa_test {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Spec(
                "cannot draw a test split disjoint from training".into(),
            ));
        }
        let q = world.sample_qa(&mut rng);
        if !train_keys.contains(&(q.question.clone(), q.question.clone())) {
            qa_test.push(q);
        }
    }
    let mut dialogue_test = Vec::with_capacity(spec.dialogues_test);
    while dialogue_test.len() < spec.dialogues_test {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Spec(
                "cannot draw a test split disjoint from training".into(),
            ));
        }
        let (d, _) = world.sample_dialogue(&mut rng);
        if pair_keys(&d).iter().all(|k| !train_keys.contains(k)) {
            dialogue_test.push(d);
        }
    }
    Ok((
        world,
        SyntheticCorpus {
            qa_train,
            qa_test,
            dialogue_train,
            dialogue_test,
        },
    ))
}
