//! Multi-turn chat with a rolling utterance history.

use crate::corpus::{concat_context, Vocabulary, DEFAULT_MAX_CONTEXT_LEN, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::inference::search::{beam_search, DecodeSettings};
use crate::seq2seq::Seq2Seq;
use crate::topic_cnn::CnnParams;

/// One conversation. The history holds at most `window` utterances,
/// alternating user and model turns, oldest first.
#[derive(Debug, Clone)]
pub struct ChatSession<'m> {
    model: &'m Seq2Seq,
    cnn: Option<&'m CnnParams>,
    vocab: &'m Vocabulary,
    pub settings: DecodeSettings,
    window: usize,
    max_context_len: usize,
    history: Vec<Vec<usize>>,
}

impl<'m> ChatSession<'m> {
    pub fn new(
        model: &'m Seq2Seq,
        cnn: Option<&'m CnnParams>,
        vocab: &'m Vocabulary,
    ) -> Result<Self> {
        if model.kind().uses_context() && cnn.is_none() {
            return Err(Error::Config(format!(
                "{} chat needs a topic encoder",
                model.kind()
            )));
        }
        Ok(Self {
            model,
            cnn,
            vocab,
            settings: DecodeSettings::default(),
            window: DEFAULT_WINDOW,
            max_context_len: DEFAULT_MAX_CONTEXT_LEN,
            history: Vec::new(),
        })
    }

    pub fn with_window(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("history window must be at least 1".into()));
        }
        self.window = window;
        Ok(self)
    }

    pub fn with_settings(mut self, settings: DecodeSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    fn push(&mut self, utterance: Vec<usize>) {
        self.history.push(utterance);
        let excess = self.history.len().saturating_sub(self.window);
        self.history.drain(..excess);
    }

    /// Topic distribution of the current history (most recent utterance
    /// first); `None` when the history is empty or there is no encoder.
    pub fn topic(&self) -> Result<Option<Vec<f64>>> {
        let Some(cnn) = self.cnn else { return Ok(None) };
        if self.history.is_empty() {
            return Ok(None);
        }
        let recent: Vec<&[usize]> = self.history.iter().rev().map(Vec::as_slice).collect();
        Ok(Some(cnn.predict(&concat_context(
            &recent,
            self.max_context_len,
        )?)?))
    }

    /// Appends `utterance`, answers it with the top beam hypothesis and
    /// appends the answer.
    pub fn turn(&mut self, utterance: &str) -> Result<String> {
        let tokens = self.vocab.encode(utterance.trim());
        if tokens.is_empty() {
            return Err(Error::Contract("empty utterance".into()));
        }
        self.push(tokens.clone());
        let context = if self.model.kind().uses_context() {
            self.topic()?
        } else {
            None
        };
        let best = beam_search(self.model, &tokens, context.as_deref(), &self.settings)?
            .into_iter()
            .next()
            .expect("beam search returns at least one hypothesis");
        let reply = best.content().to_vec();
        let text = self.vocab.decode(&reply)?;
        self.push(reply);
        Ok(text)
    }
}
