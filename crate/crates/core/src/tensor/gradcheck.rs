//! Central finite-difference verification of [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, ParamSet, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Relative error with a small absolute floor in the denominator, so that
/// gradients that are zero up to roundoff compare as absolute errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-5;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn evaluate<F>(params: &ParamSet, f: &F, with_grad: bool) -> Result<(f64, Option<Gradients>)>
where
    F: for<'g> Fn(&mut Graph<'g>, &'g ParamSet) -> Result<Var>,
{
    let mut g = Graph::new().with_finite_checks(true);
    let loss = f(&mut g, params)?;
    g.finite_check()?;
    let value = g.scalar(loss);
    let grads = if with_grad {
        Some(g.backward(loss)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// Compares backward() against central differences for every coordinate of
/// every parameter in `params` (at most `max_per_param` evenly spaced
/// coordinates per tensor when given). `f` must be deterministic; this is
/// verified by evaluating it twice at the base point.
pub fn grad_check<F>(
    params: &mut ParamSet,
    eps: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &'g ParamSet) -> Result<Var>,
{
    let (base, grads) = evaluate(params, &f, true)?;
    let (again, _) = evaluate(params, &f, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let grads = grads.expect("requested");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = match max_per_param {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let (plus, _) = evaluate(params, &f, false)?;
            params.get_mut(id).data_mut()[i] = orig - eps;
            let (minus, _) = evaluate(params, &f, false)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
