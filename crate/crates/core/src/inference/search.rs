//! Greedy and beam-search decoding.
//!
//! Decoding runs in eval mode on a single graph: live hypotheses are decoder
//! rows that share one encoded source, and surviving rows are gathered after
//! every step. Ties are broken by the lexicographically smallest token ids,
//! so all decoding is deterministic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::seq2seq::{
    decoder_step, encode, prepare, CellState, DecodeSetup, LstmState, ModelVars, Seq2Seq,
};
use crate::tensor::{log_sum_exp, Graph, SeededRng, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub beam: usize,
    /// Length-normalization exponent: hypotheses rank by `logprob / len^gamma`.
    pub gamma: f64,
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 5,
            gamma: 0.6,
            max_len: 64,
        }
    }
}

/// One decoded sequence. `tokens` exclude BOS and end with EOS when finished.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn new(tokens: Vec<usize>, logprob: f64, gamma: f64) -> Self {
        let finished = tokens.last() == Some(&EOS);
        let len = tokens.len().max(1) as f64;
        Self {
            score: logprob / len.powf(gamma),
            tokens,
            logprob,
            finished,
        }
    }

    /// Generated tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Higher value first, then lexicographically smaller tokens.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Live decoding state for one source: the graph, prepared setup and the
/// per-row decoder states.
struct Session<'a> {
    g: Graph<'a>,
    vars: ModelVars<'a>,
    base: DecodeSetup,
    rng: SeededRng,
}

impl<'a> Session<'a> {
    fn start(
        model: &'a Seq2Seq,
        source: &[usize],
        context: Option<&[f64]>,
    ) -> Result<(Self, LstmState)> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let mut rng = SeededRng::new(0);
        let encoded = encode(&mut g, &vars, source, &mut rng, false)?;
        let c = context.map(|c| g.row_vector(c)).transpose()?;
        let base = prepare(&mut g, &vars, &encoded, c)?;
        let state = encoded.v.clone();
        Ok((Self { g, vars, base, rng }, state))
    }

    /// Log-probabilities of the next token for every row, plus the new state
    /// and attention weights (`rows x source_len`).
    fn step(
        &mut self,
        prev: &[usize],
        state: &LstmState,
    ) -> Result<(Vec<Vec<f64>>, LstmState, Option<Var>)> {
        let setup = if prev.len() == 1 {
            self.base.clone()
        } else {
            self.base.expand(&mut self.g, &vec![0; prev.len()])?
        };
        let out = decoder_step(
            &mut self.g,
            &self.vars,
            &setup,
            prev,
            state,
            &mut self.rng,
            false,
        )?;
        let v = self.g.dims(out.logits).1;
        let rows = self
            .g
            .value(out.logits)
            .chunks(v)
            .map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(|x| x - lse).collect()
            })
            .collect();
        Ok((rows, out.state, out.alpha))
    }

    fn gather(&mut self, state: &LstmState, parents: &[usize]) -> Result<LstmState> {
        let index: Vec<Option<usize>> = parents.iter().map(|&p| Some(p)).collect();
        let layers = state
            .layers
            .iter()
            .map(|l| {
                Ok(CellState {
                    h: self.g.select_rows(l.h, &index)?,
                    c: self.g.select_rows(l.c, &index)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(LstmState { layers })
    }
}

/// Index of the best entry of `logp` (smallest id among equals).
fn best_token(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logp.iter().enumerate() {
        if x > logp[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode together with what the model attended to.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub tokens: Vec<usize>,
    /// One row of attention weights per generated token (empty for kinds
    /// without attention).
    pub alphas: Vec<Vec<f64>>,
    /// Context-Attn gate vectors, one per source position.
    pub gates: Option<Vec<Vec<f64>>>,
}

/// Greedy decoding that records attention weights and gates. Stops after
/// EOS or `max_len` tokens.
pub fn greedy_trace(
    model: &Seq2Seq,
    source: &[usize],
    context: Option<&[f64]>,
    max_len: usize,
) -> Result<GreedyTrace> {
    let (mut s, mut state) = Session::start(model, source, context)?;
    let gates = s.base.memory.as_ref().and_then(|m| m.gates).map(|gv| {
        let h = s.g.dims(gv).1;
        s.g.value(gv)
            .chunks(h)
            .take(source.len())
            .map(<[f64]>::to_vec)
            .collect()
    });
    let mut tokens = Vec::new();
    let mut alphas = Vec::new();
    let mut prev = BOS;
    while tokens.len() < max_len {
        let (logp, next, alpha) = s.step(&[prev], &state)?;
        if let Some(a) = alpha {
            alphas.push(s.g.value(a).to_vec());
        }
        prev = best_token(&logp[0]);
        tokens.push(prev);
        state = next;
        if prev == EOS {
            break;
        }
    }
    Ok(GreedyTrace {
        tokens,
        alphas,
        gates,
    })
}

/// Argmax token per step until EOS or `max_len` tokens.
pub fn greedy_decode(
    model: &Seq2Seq,
    source: &[usize],
    context: Option<&[f64]>,
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(greedy_trace(model, source, context, max_len)?.tokens)
}

/// Beam search; returns finished hypotheses ranked by normalized score, or
/// the single best unfinished hypothesis (flagged) when none finished.
pub fn beam_search(
    model: &Seq2Seq,
    source: &[usize],
    context: Option<&[f64]>,
    settings: &DecodeSettings,
) -> Result<Vec<BeamHypothesis>> {
    if settings.beam == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if !settings.gamma.is_finite() {
        return Err(Error::Config(
            "length-normalization exponent must be finite".into(),
        ));
    }
    let (mut s, mut state) = Session::start(model, source, context)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..settings.max_len {
        let prev: Vec<usize> = live
            .iter()
            .map(|(t, _)| t.last().copied().unwrap_or(BOS))
            .collect();
        let (logp, next, _) = s.step(&prev, &state)?;
        let mut candidates: Vec<(f64, Vec<usize>, usize)> =
            Vec::with_capacity(live.len() * logp[0].len());
        for (parent, ((tokens, lp), row)) in live.iter().zip(&logp).enumerate() {
            for (token, &x) in row.iter().enumerate() {
                let mut seq = tokens.clone();
                seq.push(token);
                candidates.push((lp + x, seq, parent));
            }
        }
        candidates.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        candidates.truncate(settings.beam);
        let mut parents = Vec::new();
        let mut survivors = Vec::new();
        for (lp, seq, parent) in candidates {
            if seq.last() == Some(&EOS) {
                pool.push(BeamHypothesis::new(seq, lp, settings.gamma));
            } else {
                parents.push(parent);
                survivors.push((seq, lp));
            }
        }
        if survivors.is_empty() {
            live.clear();
            break;
        }
        state = s.gather(&next, &parents)?;
        live = survivors;
    }
    if pool.is_empty() {
        let (tokens, lp) = live
            .into_iter()
            .min_by(|a, b| rank((a.1, &a.0), (b.1, &b.0)))
            .expect("beam keeps at least one live hypothesis without finished ones");
        return Ok(vec![BeamHypothesis::new(tokens, lp, settings.gamma)]);
    }
    pool.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    Ok(pool)
}
