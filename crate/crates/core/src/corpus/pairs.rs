use crate::corpus::loaders::{DialogueExample, QaExample};
use crate::corpus::vocab::{Vocabulary, BOS, EOS, SEP};
use crate::error::{Error, Result};

/// Default number of utterances (current plus previous) joined into a context.
pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_MAX_CONTEXT_LEN: usize = 96;

/// One supervised example. `target` is framed as `BOS .. EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub context: Vec<usize>,
    pub label: Option<usize>,
}

impl TrainingPair {
    /// Number of predicted target tokens (EOS included, BOS excluded).
    pub fn target_len(&self) -> usize {
        self.target.len() - 1
    }

    /// Target content length, without BOS/EOS framing.
    pub fn content_len(&self) -> usize {
        self.target.len().saturating_sub(2)
    }
}

pub fn frame_target(tokens: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(tokens.len() + 2);
    t.push(BOS);
    t.extend_from_slice(tokens);
    t.push(EOS);
    t
}

/// Joins utterances given most-recent-first with SEP separators, then keeps
/// the first `max_len` tokens so the most recent utterance is always present.
pub fn concat_context(utterances: &[&[usize]], max_len: usize) -> Result<Vec<usize>> {
    if utterances.is_empty() {
        return Err(Error::Contract(
            "concat_context needs at least one utterance".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(u);
        if out.len() >= max_len {
            break;
        }
    }
    out.truncate(max_len.max(1));
    Ok(out)
}

/// Context of turn `i`: turns `i, i-1, .., i-window+1` joined most-recent-first.
pub fn dialogue_context(
    turns: &[Vec<usize>],
    i: usize,
    window: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let first = (i + 1).saturating_sub(window.max(1));
    let history: Vec<&[usize]> = (first..=i).rev().map(|j| turns[j].as_slice()).collect();
    concat_context(&history, max_len)
}

/// Every adjacent turn pair `(turn_i, turn_{i+1})` of a dialogue, with the
/// context built from `turn_i` and up to `window - 1` earlier turns.
pub fn pairs_from_dialogue(
    d: &DialogueExample,
    vocab: &Vocabulary,
    window: usize,
    max_context_len: usize,
) -> Result<Vec<TrainingPair>> {
    if window == 0 {
        return Err(Error::Config("history window must be at least 1".into()));
    }
    let turns: Vec<Vec<usize>> = d.turns.iter().map(|t| vocab.encode(t)).collect();
    (0..turns.len().saturating_sub(1))
        .map(|i| {
            Ok(TrainingPair {
                source: turns[i].clone(),
                target: frame_target(&turns[i + 1]),
                context: dialogue_context(&turns, i, window, max_context_len)?,
                label: None,
            })
        })
        .collect()
}

/// A question-answer example; its context is the question itself.
pub fn pair_from_qa(ex: &QaExample, vocab: &Vocabulary, max_context_len: usize) -> TrainingPair {
    let source = vocab.encode(&ex.question);
    let mut context = source.clone();
    context.truncate(max_context_len.max(1));
    TrainingPair {
        source,
        target: frame_target(&vocab.encode(&ex.answer)),
        context,
        label: Some(ex.label),
    }
}
