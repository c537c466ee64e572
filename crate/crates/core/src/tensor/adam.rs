use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Bias-corrected Adam moments for every tensor of one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, alpha: f64) -> Result<Self> {
        Self::with_hyper(params, alpha, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(
        params: &ParamSet,
        alpha: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} not in (0, 1)")));
            }
        }
        let zeros = |t: &Tensor| Tensor::zeros(t.shape()).expect("param shapes are valid");
        Ok(Self {
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
            t: 0,
            alpha,
            beta1,
            beta2,
            epsilon,
        })
    }
}

/// One Adam update using the `grad` buffers of `params` (absent = zero).
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} moment tensors for {} parameters",
                state.m.len(),
                params.len()
            ),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id);
        if state.m[k].shape() != p.shape() || state.v[k].shape() != p.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "moment shape {:?} for parameter {:?}",
                    state.m[k].shape(),
                    p.shape()
                ),
            ));
        }
        let Some(grad) = p.grad.take() else { continue };
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= state.alpha * mhat / (vhat.sqrt() + state.epsilon);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps
            .add("w", Tensor::from_vec(&[1], vec![value]).unwrap())
            .unwrap();
        ps.get_mut(id).grad = Some(vec![grad]);
        ps
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut ps = single(1.0, 0.3);
        let mut st = AdamState::new(&ps, 1e-3).unwrap();
        adam_step(&mut ps, &mut st).unwrap();
        let expected = 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((ps.by_name("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = single(2.5, 0.0);
        let mut st = AdamState::new(&ps, 1e-2).unwrap();
        for step in 1..=3 {
            adam_step(&mut ps, &mut st).unwrap();
            assert_eq!(st.t, step);
        }
        assert_eq!(ps.by_name("w").unwrap().data()[0], 2.5);
    }

    #[test]
    fn replays_bit_identically() {
        let run = || {
            let mut ps = single(0.7, 0.0);
            let mut st = AdamState::new(&ps, 1e-2).unwrap();
            for i in 0..20 {
                let w = ps.by_name("w").unwrap().data()[0];
                ps.by_name_mut("w").unwrap().grad = Some(vec![(w - 0.1 * i as f64).sin()]);
                adam_step(&mut ps, &mut st).unwrap();
            }
            ps.by_name("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_betas_and_mismatched_state() {
        let ps = single(0.0, 0.0);
        assert!(AdamState::with_hyper(&ps, 1e-3, 1.0, 0.999, 1e-8).is_err());
        let mut other = ParamSet::new();
        other.add("a", Tensor::zeros(&[2]).unwrap()).unwrap();
        other.add("b", Tensor::zeros(&[2]).unwrap()).unwrap();
        let mut st = AdamState::new(&ps, 1e-3).unwrap();
        assert!(matches!(
            adam_step(&mut other, &mut st),
            Err(Error::Shape { .. })
        ));
    }
}
