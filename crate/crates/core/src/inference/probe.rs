//! Robustness probing: decode noisy variants of an utterance and measure how
//! often the response stays the same.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{concat_context, SyntheticWorld, Vocabulary, DEFAULT_MAX_CONTEXT_LEN};
use crate::error::{Error, Result};
use crate::inference::search::{beam_search, DecodeSettings};
use crate::seq2seq::Seq2Seq;
use crate::tensor::SeededRng;
use crate::topic_cnn::CnnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseOp {
    Insert,
    Substitute,
    Prepend,
    Append,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positions {
    All,
    List(Vec<usize>),
}

impl Positions {
    fn allows(&self, p: usize) -> bool {
        match self {
            Positions::All => true,
            Positions::List(l) => l.contains(&p),
        }
    }
}

/// Which perturbations to apply. Text form:
/// `none` or `op[+op..][;tokens=<chars>][;positions=all|i,j,..][;trials=N][;seed=N]`
/// with ops `insert`, `substitute`, `prepend`, `append`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseSpec {
    pub ops: Vec<NoiseOp>,
    /// Characters inserted or substituted.
    pub tokens: Vec<char>,
    pub positions: Positions,
    /// Number of variants sampled; 0 keeps every variant.
    pub trials: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            ops: Vec::new(),
            tokens: Vec::new(),
            positions: Positions::All,
            trials: 0,
            seed: 1,
        }
    }

    pub fn insertion(tokens: &[char]) -> Self {
        Self {
            ops: vec![NoiseOp::Insert],
            tokens: tokens.to_vec(),
            ..Self::none()
        }
    }

    /// Every variant of `text` (or the seeded sample of `trials` of them);
    /// without ops the only variant is `text` itself.
    pub fn variants(&self, text: &str) -> Result<Vec<String>> {
        if self.ops.is_empty() {
            return Ok(vec![text.to_string()]);
        }
        if self.tokens.is_empty() {
            return Err(Error::Config("noise spec needs at least one token".into()));
        }
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let mut out = Vec::new();
        let insert_at = |p: usize, t: char| {
            let mut v = chars.clone();
            v.insert(p, t);
            v.into_iter().collect::<String>()
        };
        for op in &self.ops {
            for &t in &self.tokens {
                match op {
                    NoiseOp::Insert => {
                        out.extend(
                            (0..=n)
                                .filter(|&p| self.positions.allows(p))
                                .map(|p| insert_at(p, t)),
                        );
                    }
                    NoiseOp::Substitute => {
                        for p in (0..n).filter(|&p| self.positions.allows(p) && chars[p] != t) {
                            let mut v = chars.clone();
                            v[p] = t;
                            out.push(v.into_iter().collect());
                        }
                    }
                    NoiseOp::Prepend => out.push(insert_at(0, t)),
                    NoiseOp::Append => out.push(insert_at(n, t)),
                }
            }
        }
        if self.trials > 0 && self.trials < out.len() {
            let mut rng = SeededRng::new(self.seed);
            rng.shuffle(&mut out);
            out.truncate(self.trials);
        }
        Ok(out)
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("noise spec {s:?}: {m}"));
        let mut parts = s.trim().split(';');
        let head = parts.next().unwrap_or_default().trim();
        let mut spec = Self::none();
        if head != "none" {
            for op in head.split('+') {
                spec.ops.push(match op.trim() {
                    "insert" => NoiseOp::Insert,
                    "substitute" => NoiseOp::Substitute,
                    "prepend" => NoiseOp::Prepend,
                    "append" => NoiseOp::Append,
                    other => return Err(bad(format!("unknown operation {other:?}"))),
                });
            }
        }
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
            match k.trim() {
                "tokens" => spec.tokens = v.chars().collect(),
                "positions" if v.trim() == "all" => spec.positions = Positions::All,
                "positions" => {
                    let list = v
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("bad positions {v:?}")))?;
                    spec.positions = Positions::List(list);
                }
                "trials" => {
                    spec.trials = v
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad trials {v:?}")))?
                }
                "seed" => {
                    spec.seed = v
                        .trim()
                        .parse()
                        .map_err(|_| bad(format!("bad seed {v:?}")))?
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        if !spec.ops.is_empty() && spec.tokens.is_empty() {
            return Err(bad("operations need tokens=<chars>".into()));
        }
        Ok(spec)
    }
}

/// Maps characters that belong to exactly one topic vocabulary to that topic.
#[derive(Debug, Clone, Default)]
pub struct TopicClasses {
    map: HashMap<char, usize>,
}

impl TopicClasses {
    pub fn from_world(world: &SyntheticWorld) -> Self {
        let mut map = HashMap::new();
        for ch in world.alphabet().chars() {
            if let [k] = world.topics_of(ch).as_slice() {
                map.insert(ch, *k);
            }
        }
        Self { map }
    }

    /// Majority topic of the topical characters of `text` (smallest topic on
    /// ties); `None` when it has none.
    pub fn topic_of(&self, text: &str) -> Option<usize> {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for ch in text.chars() {
            if let Some(&k) = self.map.get(&ch) {
                *counts.entry(k).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub input: String,
    pub response: String,
    pub exact: bool,
    pub topic_stable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub input: String,
    pub response: String,
    pub variants: Vec<ProbeRecord>,
    /// Fraction of variants answered exactly like the clean input.
    pub exact_match: f64,
    /// Fraction of variants whose answer keeps the clean answer's topic.
    pub topic_stability: Option<f64>,
}

impl ProbeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Decoder plus everything needed to answer one utterance in context.
#[derive(Debug, Clone, Copy)]
pub struct Responder<'m> {
    pub model: &'m Seq2Seq,
    pub cnn: Option<&'m CnnParams>,
    pub vocab: &'m Vocabulary,
    pub settings: DecodeSettings,
}

impl Responder<'_> {
    /// Top beam answer to `utterance` given earlier turns (oldest first).
    pub fn respond(&self, history: &[String], utterance: &str) -> Result<String> {
        let tokens = self.vocab.encode(utterance);
        if tokens.is_empty() {
            return Err(Error::Contract("empty utterance".into()));
        }
        let context = match (self.model.kind().uses_context(), self.cnn) {
            (false, _) => None,
            (true, None) => {
                return Err(Error::Config(format!(
                    "{} needs a topic encoder",
                    self.model.kind()
                )))
            }
            (true, Some(cnn)) => {
                let earlier: Vec<Vec<usize>> =
                    history.iter().rev().map(|h| self.vocab.encode(h)).collect();
                let mut recent: Vec<&[usize]> = vec![&tokens];
                recent.extend(earlier.iter().map(Vec::as_slice));
                Some(cnn.predict(&concat_context(&recent, DEFAULT_MAX_CONTEXT_LEN)?)?)
            }
        };
        let best = beam_search(self.model, &tokens, context.as_deref(), &self.settings)?
            .into_iter()
            .next()
            .expect("beam search returns at least one hypothesis");
        self.vocab.decode(best.content())
    }
}

/// Answers `utterance` and each of its noisy variants (history held fixed,
/// so contextual models see the noisy utterance in their context too).
pub fn robustness_probe(
    responder: &Responder<'_>,
    history: &[String],
    utterance: &str,
    noise: &NoiseSpec,
    classes: Option<&TopicClasses>,
) -> Result<ProbeReport> {
    let clean = responder.respond(history, utterance)?;
    let clean_topic = classes.map(|c| c.topic_of(&clean));
    let mut variants = Vec::new();
    for input in noise.variants(utterance)? {
        let response = responder.respond(history, &input)?;
        let topic_stable = classes.map(|c| c.topic_of(&response) == clean_topic.flatten());
        variants.push(ProbeRecord {
            exact: response == clean,
            input,
            response,
            topic_stable,
        });
    }
    let n = variants.len().max(1) as f64;
    let exact_match = variants.iter().filter(|v| v.exact).count() as f64 / n;
    let topic_stability = classes.map(|_| {
        variants
            .iter()
            .filter(|v| v.topic_stable == Some(true))
            .count() as f64
            / n
    });
    Ok(ProbeReport {
        input: utterance.to_string(),
        response: clean,
        variants,
        exact_match,
        topic_stability,
    })
}
