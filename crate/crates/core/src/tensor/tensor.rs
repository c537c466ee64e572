use crate::error::{Error, Result};
use crate::tensor::rng::SeededRng;

/// Dense row-major array of `f64` values.
///
/// `grad` is populated by [`crate::tensor::ParamSet::accumulate`] after a
/// backward pass and has the same length as `data` whenever present.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    Gaussian { mu: f64, sigma: f64 },
}

impl Tensor {
    /// Builds a tensor of `shape`. The rng is consumed only by random inits.
    pub fn new(shape: &[usize], init: Init, rng: &mut SeededRng) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(x) => vec![x; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| rng.uniform(lo, hi)).collect(),
            Init::Gaussian { mu, sigma } => (0..n).map(|_| rng.gaussian(mu, sigma)).collect(),
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns when viewed as a matrix; rank-1 tensors are row vectors.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor_new",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_init() {
        let mut rng = SeededRng::new(0);
        let z = Tensor::new(&[2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::new(&[3], Init::Constant(1.5), &mut rng).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_init_replays_bit_identically() {
        let a = Tensor::new(
            &[4],
            Init::Uniform { lo: -0.1, hi: 0.1 },
            &mut SeededRng::new(7),
        )
        .unwrap();
        let b = Tensor::new(
            &[4],
            Init::Uniform { lo: -0.1, hi: 0.1 },
            &mut SeededRng::new(7),
        )
        .unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.data().iter().all(|x| (-0.1..0.1).contains(x)));
    }

    #[test]
    fn rejects_zero_extent() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(
            Tensor::new(&[2, 0], Init::Zeros, &mut rng),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }
}
