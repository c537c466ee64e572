//! Encoder, per-step decoder wiring for every kind, and teacher-forced scoring.
//!
//! Every function works on a batch of `n` rows. Sources of different length
//! are right-padded to the longest one; padded encoder steps leave the state
//! untouched and padded positions are masked out of attention, so each row
//! computes exactly what it would compute alone.

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::seq2seq::attention::{
    attend, cnn_memory, gated_context_attention, soft_memory, AttentionMemory,
};
use crate::seq2seq::cells::{context_gate_term, stack_step, CellState, LstmState};
use crate::seq2seq::config::{ContextIoMode, DecoderKind};
use crate::seq2seq::model::ModelVars;
use crate::tensor::{linear, log_sum_exp, Graph, SeededRng, Var};

/// Large negative score added at padded source positions.
const MASKED: f64 = -1e30;

/// Encoder result for `n` sources: final states `v` (`n x hidden` per layer)
/// and top-layer outputs `H` as `(n * width) x hidden`, block `b` holding
/// source `b` in original position order followed by zero rows.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub v: LstmState,
    pub outputs: Var,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl EncodedSource {
    /// Rows of `H` belonging to source `b` (only the first `lens[b]` are real).
    pub fn block(&self, b: usize) -> std::ops::Range<usize> {
        b * self.width..(b + 1) * self.width
    }
}

pub fn encode<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    source: &[usize],
    rng: &mut SeededRng,
    training: bool,
) -> Result<EncodedSource> {
    encode_batch(g, vars, &[source], rng, training)
}

pub fn encode_batch<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    sources: &[&[usize]],
    rng: &mut SeededRng,
    training: bool,
) -> Result<EncodedSource> {
    if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
        return Err(Error::Contract("cannot encode an empty source".into()));
    }
    let cfg = &vars.config;
    let n = sources.len();
    let lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
    let width = *lens.iter().max().expect("non-empty");
    let reverse = cfg.reverses_source();
    let mut state = LstmState::zeros(g, n, cfg.n_layers, cfg.hidden)?;
    let mut steps = Vec::with_capacity(width);
    for t in 0..width {
        let active: Vec<bool> = lens.iter().map(|&l| t < l).collect();
        let tokens: Vec<usize> = sources
            .iter()
            .map(|s| match (t < s.len(), reverse) {
                (false, _) => PAD,
                (true, false) => s[t],
                (true, true) => s[s.len() - 1 - t],
            })
            .collect();
        let x = vars.embed_rows(g, true, &tokens)?;
        let (out, next) = stack_step(
            g,
            x,
            &state,
            &vars.enc,
            &[],
            None,
            cfg.dropout,
            rng,
            training,
        )?;
        state = if active.iter().all(|&a| a) {
            next
        } else {
            let mut layers = Vec::with_capacity(next.layers.len());
            for (new, old) in next.layers.iter().zip(&state.layers) {
                layers.push(CellState {
                    h: g.blend_rows(new.h, old.h, &active)?,
                    c: g.blend_rows(new.c, old.c, &active)?,
                });
            }
            LstmState { layers }
        };
        steps.push(out);
    }
    let stacked = g.stack_rows(&steps)?;
    let mut index = vec![None; n * width];
    for (b, &len) in lens.iter().enumerate() {
        for t in 0..len {
            let pos = if reverse { len - 1 - t } else { t };
            index[b * width + pos] = Some(t * n + b);
        }
    }
    Ok(EncodedSource {
        v: state,
        outputs: g.select_rows(stacked, &index)?,
        lens,
        width,
    })
}

/// Per-sequence decoder inputs derived from the sources and topic vectors,
/// computed once and reused at every target step (the context is static).
#[derive(Debug, Clone)]
pub struct DecodeSetup {
    pub kind: DecoderKind,
    pub rows: usize,
    pub context: Option<Var>,
    extras: Vec<Option<Var>>,
    cell_scale: Option<Var>,
    input_add: Option<Var>,
    output_add: Option<Var>,
    pub memory: Option<AttentionMemory>,
    pub lens: Vec<usize>,
    pub width: usize,
}

fn block_index(rows: &[usize], width: usize) -> Vec<Option<usize>> {
    rows.iter()
        .flat_map(|&r| (0..width).map(move |p| Some(r * width + p)))
        .collect()
}

impl DecodeSetup {
    /// A setup whose row `i` decodes source `rows[i]` of `self` (used to run
    /// several hypotheses for the same source side by side).
    pub fn expand(&self, g: &mut Graph<'_>, rows: &[usize]) -> Result<Self> {
        let pick: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let mut sel = |v: Option<Var>| -> Result<Option<Var>> {
            v.map(|v| g.select_rows(v, &pick)).transpose()
        };
        let context = sel(self.context)?;
        let extras = self.extras.iter().map(|e| sel(*e)).collect::<Result<_>>()?;
        let cell_scale = sel(self.cell_scale)?;
        let input_add = sel(self.input_add)?;
        let output_add = sel(self.output_add)?;
        let memory = match &self.memory {
            None => None,
            Some(m) => {
                let blocks = block_index(rows, self.width);
                Some(AttentionMemory {
                    values: g.select_rows(m.values, &blocks)?,
                    keys: g.select_rows(m.keys, &blocks)?,
                    gates: m.gates.map(|x| g.select_rows(x, &blocks)).transpose()?,
                    mask: m.mask.map(|x| g.select_rows(x, &pick)).transpose()?,
                    width: m.width,
                })
            }
        };
        Ok(Self {
            kind: self.kind,
            rows: rows.len(),
            context,
            extras,
            cell_scale,
            input_add,
            output_add,
            memory,
            lens: rows.iter().map(|&r| self.lens[r]).collect(),
            width: self.width,
        })
    }
}

/// Checks the kind/context pairing and precomputes context projections and
/// attention memory. `c` must be `n x K` for contextual kinds and absent for
/// the baselines.
pub fn prepare<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    encoded: &EncodedSource,
    c: Option<Var>,
) -> Result<DecodeSetup> {
    let cfg = &vars.config;
    let kind = cfg.kind;
    let n = encoded.lens.len();
    match (kind.uses_context(), c) {
        (true, None) => {
            return Err(Error::Contract(format!(
                "{kind} decoder needs a topic vector"
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Contract(format!(
                "{kind} decoder takes no topic vector"
            )))
        }
        (true, Some(c)) if g.dims(c) != (n, cfg.k_topics) => {
            return Err(Error::Contract(format!(
                "topic vectors have shape {:?}, expected {n}x{}",
                g.dims(c),
                cfg.k_topics
            )))
        }
        _ => {}
    }
    let width = encoded.width;
    let mask = if encoded.lens.iter().all(|&l| l == width) {
        None
    } else {
        let data = encoded
            .lens
            .iter()
            .flat_map(|&l| (0..width).map(move |p| if p < l { 0.0 } else { MASKED }))
            .collect();
        Some(g.constant_vec(n, width, data)?)
    };
    let mut setup = DecodeSetup {
        kind,
        rows: n,
        context: c,
        extras: Vec::new(),
        cell_scale: None,
        input_add: None,
        output_add: None,
        memory: None,
        lens: encoded.lens.clone(),
        width,
    };
    match kind {
        DecoderKind::Vanilla => {}
        DecoderKind::SoftAttention => {
            let attn = vars.attn.as_ref().expect("attention weights");
            setup.memory = Some(soft_memory(g, encoded.outputs, width, mask, attn)?);
        }
        DecoderKind::ContextIn => {
            let c = c.expect("checked");
            for lv in &vars.dec {
                let wc = lv.wc.expect("context-in weights");
                setup
                    .extras
                    .push(Some(context_gate_term(g, c, wc, cfg.hidden)?));
            }
        }
        DecoderKind::ContextIo => {
            let c = c.expect("checked");
            let (win, wout) = vars.io.expect("context-io weights");
            let inj = g.matmul(c, win)?;
            match cfg.context_io_mode {
                ContextIoMode::Additive => setup.input_add = Some(inj),
                ContextIoMode::Modulate => {
                    let ones = g.constant_vec(n, cfg.hidden, vec![1.0; n * cfg.hidden])?;
                    setup.cell_scale = Some(g.add(ones, inj)?);
                }
            }
            setup.output_add = Some(g.matmul(c, wout)?);
        }
        DecoderKind::ContextAttn => {
            let c = c.expect("checked");
            let gate = vars.gate.as_ref().expect("gate weights");
            let attn = vars.attn.as_ref().expect("attention weights");
            let (gated, gates) = gated_context_attention(g, encoded.outputs, width, c, gate)?;
            setup.memory = Some(cnn_memory(
                g,
                gated,
                width,
                mask,
                Some(gates),
                gate,
                attn,
                cfg.attn_width,
            )?);
        }
    }
    Ok(setup)
}

/// Output of one decoder step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `n x V` unnormalized scores.
    pub logits: Var,
    pub state: LstmState,
    /// `n x width` attention weights for attention kinds.
    pub alpha: Option<Var>,
}

/// Consumes `y_prev` (one token per row) and produces logits for the next token.
pub fn decoder_step<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    setup: &DecodeSetup,
    y_prev: &[usize],
    state: &LstmState,
    rng: &mut SeededRng,
    training: bool,
) -> Result<StepOutput> {
    let cfg = &vars.config;
    if setup.kind != cfg.kind {
        return Err(Error::Contract(format!(
            "decode setup for {} used with a {} model",
            setup.kind, cfg.kind
        )));
    }
    if y_prev.len() != setup.rows {
        return Err(Error::shape(
            "decoder_step",
            format!("{} input tokens for {} rows", y_prev.len(), setup.rows),
        ));
    }
    let mut x = vars.embed_rows(g, false, y_prev)?;
    if let Some(add) = setup.input_add {
        x = g.add(x, add)?;
    }
    let mut alpha = None;
    if let Some(memory) = &setup.memory {
        let attn = vars.attn.as_ref().expect("attention weights");
        let (a, w) = attend(g, memory, state.top().h, attn)?;
        x = g.concat(&[x, a])?;
        alpha = Some(w);
    }
    let (top, state) = stack_step(
        g,
        x,
        state,
        &vars.dec,
        &setup.extras,
        setup.cell_scale,
        cfg.dropout,
        rng,
        training,
    )?;
    let mut logits = linear(g, top, vars.out_w, vars.out_b)?;
    if let Some(add) = setup.output_add {
        logits = g.add(logits, add)?;
    }
    Ok(StepOutput {
        logits,
        state,
        alpha,
    })
}

/// `-log softmax(row)[target]`.
pub fn token_nll(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

/// Teacher-forced scores of a batch.
#[derive(Debug, Clone)]
pub struct BatchScore {
    /// Scalar sum of every row's negative log-likelihood (differentiable).
    pub loss: Var,
    /// Per-row negative log-likelihood.
    pub nll: Vec<f64>,
    /// Per-row per-step negative log-likelihoods.
    pub step_nll: Vec<Vec<f64>>,
    /// Per-row predicted-token counts (target length minus BOS).
    pub tokens: Vec<usize>,
}

impl BatchScore {
    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().sum()
    }
}

/// Scores framed targets (each starting with BOS) given their sources and
/// optional `n x K` topic vectors.
#[allow(clippy::too_many_arguments)]
pub fn batch_logprob<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    sources: &[&[usize]],
    targets: &[&[usize]],
    c: Option<Var>,
    rng: &mut SeededRng,
    training: bool,
) -> Result<BatchScore> {
    if sources.len() != targets.len() {
        return Err(Error::shape(
            "batch_logprob",
            format!("{} sources for {} targets", sources.len(), targets.len()),
        ));
    }
    if targets.iter().any(|t| t.len() < 2) {
        return Err(Error::Contract(
            "target needs BOS and at least one token".into(),
        ));
    }
    let encoded = encode_batch(g, vars, sources, rng, training)?;
    let setup = prepare(g, vars, &encoded, c)?;
    let n = targets.len();
    let steps = targets
        .iter()
        .map(|t| t.len() - 1)
        .max()
        .expect("non-empty");
    let mut state = encoded.v.clone();
    let mut losses = Vec::with_capacity(steps);
    let mut step_nll = vec![Vec::new(); n];
    for t in 0..steps {
        let y_prev: Vec<usize> = targets
            .iter()
            .map(|y| if t + 1 < y.len() { y[t] } else { PAD })
            .collect();
        let gold: Vec<Option<usize>> = targets.iter().map(|y| y.get(t + 1).copied()).collect();
        let step = decoder_step(g, vars, &setup, &y_prev, &state, rng, training)?;
        let v = g.dims(step.logits).1;
        let values = g.value(step.logits);
        for (b, y) in gold.iter().enumerate() {
            if let Some(y) = y {
                step_nll[b].push(token_nll(&values[b * v..(b + 1) * v], *y));
            }
        }
        losses.push(g.cross_entropy_rows(step.logits, &gold)?);
        state = step.state;
    }
    Ok(BatchScore {
        loss: g.sum_all(&losses)?,
        nll: step_nll.iter().map(|s| s.iter().sum()).collect(),
        step_nll,
        tokens: targets.iter().map(|t| t.len() - 1).collect(),
    })
}

/// Teacher-forced score of one target.
#[derive(Debug, Clone)]
pub struct SequenceScore {
    /// Scalar sum of per-step negative log-likelihoods (differentiable).
    pub loss: Var,
    /// `log p(target | source, c)`.
    pub logprob: f64,
    pub step_losses: Vec<f64>,
    /// Predicted tokens: target length minus the leading BOS.
    pub tokens: usize,
}

/// Scores `target` (framed, starting with BOS) given `source` and the
/// optional `1 x K` topic vector `c`.
pub fn sequence_logprob<'a>(
    g: &mut Graph<'a>,
    vars: &ModelVars<'a>,
    source: &[usize],
    target: &[usize],
    c: Option<Var>,
    rng: &mut SeededRng,
    training: bool,
) -> Result<SequenceScore> {
    let mut score = batch_logprob(g, vars, &[source], &[target], c, rng, training)?;
    Ok(SequenceScore {
        loss: score.loss,
        logprob: -score.nll[0],
        step_losses: score.step_nll.pop().expect("one row"),
        tokens: score.tokens[0],
    })
}
