//! LSTM cells, plain and context-conditioned.

use crate::error::{Error, Result};
use crate::seq2seq::model::LayerVars;
use crate::tensor::{linear, Graph, SeededRng, Var};

#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

/// Per-layer `(h, C)` of a stacked LSTM, bottom layer first; each is
/// `rows x hidden` for a batch of `rows` sequences.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub layers: Vec<CellState>,
}

impl LstmState {
    /// Zero state for `rows` sequences.
    pub fn zeros(g: &mut Graph<'_>, rows: usize, n_layers: usize, hidden: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| {
                Ok(CellState {
                    h: g.constant_vec(rows, hidden, vec![0.0; rows * hidden])?,
                    c: g.constant_vec(rows, hidden, vec![0.0; rows * hidden])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn top(&self) -> CellState {
        *self.layers.last().expect("at least one layer")
    }
}

/// One cell update on `rows x input` inputs `x`.
///
/// `extra` (`rows x 4h`) is added to the gate pre-activations before the
/// nonlinearities; `cell_scale` (`rows x h`) multiplies the previous cell.
pub fn lstm_cell(
    g: &mut Graph<'_>,
    x: Var,
    prev: CellState,
    w: Var,
    b: Var,
    extra: Option<Var>,
    cell_scale: Option<Var>,
) -> Result<CellState> {
    let h = g.dims(prev.h).1;
    if g.dims(x).0 != g.dims(prev.h).0 {
        return Err(Error::shape(
            "lstm_cell",
            format!(
                "{} input rows for {} state rows",
                g.dims(x).0,
                g.dims(prev.h).0
            ),
        ));
    }
    let xh = g.concat(&[x, prev.h])?;
    let mut z = linear(g, xh, w, b)?;
    if g.dims(z).1 != 4 * h {
        return Err(Error::shape(
            "lstm_cell",
            format!("gate width {} for hidden {h}", g.dims(z).1),
        ));
    }
    if let Some(e) = extra {
        z = g.add(z, e)?;
    }
    let zi = g.slice_cols(z, 0, h)?;
    let zf = g.slice_cols(z, h, h)?;
    let zo = g.slice_cols(z, 2 * h, h)?;
    let zg = g.slice_cols(z, 3 * h, h)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zg);
    let c_prev = match cell_scale {
        Some(s) => g.mul(prev.c, s)?,
        None => prev.c,
    };
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok(CellState { h, c })
}

/// Projected context term for one Context-In layer, widened to all four gates.
pub(crate) fn context_gate_term(g: &mut Graph<'_>, c: Var, wc: Var, hidden: usize) -> Result<Var> {
    let proj = g.matmul(c, wc)?;
    match g.dims(proj).1 {
        n if n == 4 * hidden => Ok(proj),
        n if n == hidden => g.concat(&[proj, proj, proj, proj]),
        n => Err(Error::shape(
            "clstm",
            format!("context projection width {n} for hidden {hidden}"),
        )),
    }
}

/// Runs one time step through every layer. Returns the (dropped-out) top
/// output and the new state; the state keeps the undropped `h`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stack_step(
    g: &mut Graph<'_>,
    x: Var,
    state: &LstmState,
    layers: &[LayerVars],
    extras: &[Option<Var>],
    cell_scale: Option<Var>,
    dropout: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Var, LstmState)> {
    if state.layers.len() != layers.len() {
        return Err(Error::shape(
            "lstm_step",
            format!(
                "{} state layers for {} weight layers",
                state.layers.len(),
                layers.len()
            ),
        ));
    }
    let mut input = x;
    let mut next = Vec::with_capacity(layers.len());
    for (l, (lv, prev)) in layers.iter().zip(&state.layers).enumerate() {
        let extra = extras.get(l).copied().flatten();
        let scale = if l == 0 { cell_scale } else { None };
        let cell = lstm_cell(g, input, *prev, lv.w, lv.b, extra, scale)?;
        input = g.dropout(cell.h, dropout, rng, training)?;
        next.push(cell);
    }
    Ok((input, LstmState { layers: next }))
}

/// Standard stacked LSTM step.
pub fn lstm_step(
    g: &mut Graph<'_>,
    x: Var,
    state: &LstmState,
    layers: &[LayerVars],
    dropout: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Var, LstmState)> {
    stack_step(g, x, state, layers, &[], None, dropout, rng, training)
}

/// Context-In step: every layer's gates and candidate receive `W_cx c`.
#[allow(clippy::too_many_arguments)]
pub fn clstm_step(
    g: &mut Graph<'_>,
    x: Var,
    state: &LstmState,
    c: Var,
    layers: &[LayerVars],
    dropout: f64,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Var, LstmState)> {
    let mut extras = Vec::with_capacity(layers.len());
    for lv in layers {
        let wc = lv.wc.ok_or_else(|| {
            Error::Contract("clstm_step needs context weights on every layer".into())
        })?;
        let hidden = g.dims(lv.b).1 / 4;
        extras.push(Some(context_gate_term(g, c, wc, hidden)?));
    }
    stack_step(g, x, state, layers, &extras, None, dropout, rng, training)
}
