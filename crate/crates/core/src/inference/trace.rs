//! Attention-trace export for attention-bearing decoders.

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::search::greedy_trace;
use crate::seq2seq::Seq2Seq;

/// Greedy decode of one source with its attention weights (`alpha`, one row
/// per generated token over source positions) and, for Context-Attn, the
/// gate vector of every source position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub alpha: Vec<Vec<f64>>,
    pub gates: Option<Vec<Vec<f64>>>,
    pub context: Vec<f64>,
}

impl AttentionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    /// Monospace heat grid: one row per generated token, one column per
    /// source token; darker glyphs mark larger weights.
    pub fn ascii(&self) -> String {
        const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];
        let width = self
            .source
            .iter()
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(1)
            .max(1);
        let label = self
            .target
            .iter()
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(1)
            .max(1);
        let mut out = format!("{:label$} |", "");
        for s in &self.source {
            out.push_str(&format!("{s:>width$}"));
        }
        out.push('\n');
        for (t, row) in self.target.iter().zip(&self.alpha) {
            out.push_str(&format!("{t:label$} |"));
            for &a in row {
                let level = ((a * SHADES.len() as f64) as usize).min(SHADES.len() - 1);
                out.push_str(&SHADES[level].to_string().repeat(width));
            }
            out.push('\n');
        }
        out
    }
}

pub fn attention_trace(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    source: &[usize],
    context: Option<&[f64]>,
    max_len: usize,
) -> Result<AttentionTrace> {
    if !model.kind().uses_attention() {
        return Err(Error::Contract(format!(
            "{} decoder has no attention to trace",
            model.kind()
        )));
    }
    let trace = greedy_trace(model, source, context, max_len)?;
    Ok(AttentionTrace {
        source: source.iter().map(|&t| vocab.display(t)).collect(),
        target: trace.tokens.iter().map(|&t| vocab.display(t)).collect(),
        alpha: trace.alphas,
        gates: trace.gates,
        context: context.map(<[f64]>::to_vec).unwrap_or_default(),
    })
}
