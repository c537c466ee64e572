//! Composite layers built from graph primitives.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// One bank of `F` text-convolution filters of a single height. `weight` is
/// `(height * d) x F` (window rows flattened), `bias` is `1 x F`.
#[derive(Debug, Clone, Copy)]
pub struct FilterBank {
    pub height: usize,
    pub weight: Var,
    pub bias: Var,
}

/// Valid 1-D convolution of an `L x d` input with each filter bank; filters
/// span the full width `d`. Bank `i` yields an `(L - h_i + 1) x F` map.
pub fn conv_text(g: &mut Graph<'_>, input: Var, banks: &[FilterBank]) -> Result<Vec<Var>> {
    let (len, d) = g.dims(input);
    banks
        .iter()
        .map(|bank| {
            if len < bank.height {
                return Err(Error::InputTooShort {
                    len,
                    height: bank.height,
                });
            }
            let (wr, _) = g.dims(bank.weight);
            if wr != bank.height * d {
                return Err(Error::shape(
                    "conv_text",
                    format!("filter rows {wr} != height {} x width {d}", bank.height),
                ));
            }
            let windows = g.unfold(input, bank.height, 0, 0)?;
            let z = g.matmul(windows, bank.weight)?;
            g.add_row(z, bank.bias)
        })
        .collect()
}

/// Same-padded convolution of odd `height`: output has as many rows as input.
pub fn conv_same(
    g: &mut Graph<'_>,
    input: Var,
    height: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    if height.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "same padding needs an odd height, got {height}"
        )));
    }
    let pad = height / 2;
    let windows = g.unfold(input, height, pad, pad)?;
    let z = g.matmul(windows, weight)?;
    g.add_row(z, bias)
}

/// `x W + b` for an `m x k` input, `k x n` weight and `1 x n` bias.
pub fn linear(g: &mut Graph<'_>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let z = g.matmul(x, weight)?;
    g.add_row(z, bias)
}
