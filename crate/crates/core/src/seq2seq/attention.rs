//! Additive attention and the gated contextual attention of Context-Attn.
//!
//! Attention memories hold `n` sources stacked as `(n * width) x d` blocks;
//! an optional `n x width` mask adds a large negative score at padded
//! positions so they receive exactly zero weight.

use crate::error::Result;
use crate::seq2seq::model::{AttnVars, GateVars};
use crate::tensor::{Graph, Var};

/// Per-sequence attention inputs: the values averaged by the weights and the
/// projected keys `W_k key_t`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    pub values: Var,
    pub keys: Var,
    /// Context-Attn gates, same layout as `values`.
    pub gates: Option<Var>,
    pub mask: Option<Var>,
    pub width: usize,
}

fn repeat_blocks(n: usize, width: usize) -> Vec<Option<usize>> {
    (0..n)
        .flat_map(|b| std::iter::repeat_n(Some(b), width))
        .collect()
}

/// Scores `v . tanh(W_k key_t + W_s s)`, normalizes them per row and returns
/// the attention vectors `a_b = sum_t alpha_bt value_bt` (`n x d`) with the
/// `n x width` weights.
pub fn attend(
    g: &mut Graph<'_>,
    memory: &AttentionMemory,
    s: Var,
    attn: &AttnVars,
) -> Result<(Var, Var)> {
    let n = g.dims(s).0;
    let query = g.matmul(s, attn.ws)?;
    let query = if n == 1 {
        query
    } else {
        g.select_rows(query, &repeat_blocks(n, memory.width))?
    };
    let pre = if n == 1 {
        g.add_row(memory.keys, query)?
    } else {
        g.add(memory.keys, query)?
    };
    let act = g.tanh(pre);
    let scores = g.matmul(act, attn.v)?;
    let mut scores = g.reshape(scores, n, memory.width)?;
    if let Some(mask) = memory.mask {
        scores = g.add(scores, mask)?;
    }
    let alpha = g.softmax(scores);
    let a = g.block_pool(alpha, memory.values)?;
    Ok((a, alpha))
}

/// Memory for plain soft attention: keys and values are the encoder outputs.
pub fn soft_memory(
    g: &mut Graph<'_>,
    outputs: Var,
    width: usize,
    mask: Option<Var>,
    attn: &AttnVars,
) -> Result<AttentionMemory> {
    Ok(AttentionMemory {
        values: outputs,
        keys: g.matmul(outputs, attn.wk)?,
        gates: None,
        mask,
        width,
    })
}

/// Soft attention of decoder state `s` (`1 x hidden`) over the rows of `h`.
pub fn attention_soft(g: &mut Graph<'_>, h: Var, s: Var, attn: &AttnVars) -> Result<(Var, Var)> {
    let width = g.dims(h).0;
    let memory = soft_memory(g, h, width, None, attn)?;
    attend(g, &memory, s, attn)
}

/// `g_t = sigmoid(W^c c + W^h h_t + b_c)` for every row of `h` and the gated
/// outputs `h'_t = g_t * h_t`. `h` holds `n` blocks of `width` rows and `c`
/// one topic vector per block. Returns `(H', G)`.
pub fn gated_context_attention(
    g: &mut Graph<'_>,
    h: Var,
    width: usize,
    c: Var,
    gate: &GateVars,
) -> Result<(Var, Var)> {
    let n = g.dims(c).0;
    let from_c = g.matmul(c, gate.wc)?;
    let shift = g.add_row(from_c, gate.b)?;
    let from_h = g.matmul(h, gate.wh)?;
    let pre = if n == 1 {
        g.add_row(from_h, shift)?
    } else {
        let spread = g.select_rows(shift, &repeat_blocks(n, width))?;
        g.add(from_h, spread)?
    };
    let gates = g.sigmoid(pre);
    let gated = g.mul(gates, h)?;
    Ok((gated, gates))
}

/// Memory for Context-Attn: keys from a same-padded `conv_width` convolution
/// with tanh over each block of gated outputs; values are the gated outputs.
#[allow(clippy::too_many_arguments)]
pub fn cnn_memory(
    g: &mut Graph<'_>,
    gated: Var,
    width: usize,
    mask: Option<Var>,
    gates: Option<Var>,
    gate: &GateVars,
    attn: &AttnVars,
    conv_width: usize,
) -> Result<AttentionMemory> {
    let pad = conv_width / 2;
    let windows = g.unfold_blocks(gated, conv_width, pad, pad, width)?;
    let z = g.matmul(windows, gate.conv_w)?;
    let z = g.add_row(z, gate.conv_b)?;
    let keys = g.tanh(z);
    Ok(AttentionMemory {
        values: gated,
        keys: g.matmul(keys, attn.wk)?,
        gates,
        mask,
        width,
    })
}

/// Attention vector over gated outputs `H'` (one source) with convolutional keys.
pub fn attention_vector_cnn(
    g: &mut Graph<'_>,
    gated: Var,
    s: Var,
    gate: &GateVars,
    attn: &AttnVars,
    conv_width: usize,
) -> Result<(Var, Var)> {
    let width = g.dims(gated).0;
    let memory = cnn_memory(g, gated, width, None, None, gate, attn, conv_width)?;
    attend(g, &memory, s, attn)
}
