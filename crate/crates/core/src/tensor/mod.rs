//! Dense row-major tensors with reverse-mode differentiation.
//!
//! The op set is deliberately small: batched matmul, broadcasting
//! elementwise arithmetic, tanh, (masked) softmax, gather, stacking and a
//! handful of reductions. That is exactly what adapter composition,
//! cross-attention routing and the two training loops need. Everything is
//! 64-bit; any NaN/Inf escaping an operation is an error, not a value.

mod check;
mod shape;
mod tape;

pub use check::finite_diff_check;
pub use tape::{GradMap, Tape, Var};

pub(crate) use shape::{broadcast_shapes, expand_to, reduce_to_shape, strides_of};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major f64 tensor. A shape of `[]` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Populated by [`Tape::backward`] for leaves that require gradients.
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(vec![], vec![x]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation (Box-Muller).
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < numel {
                data.push(r * theta.sin() * std);
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf for subsequent tape use.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Vec<f64>) {
        self.grad = Some(g);
    }

    /// Scalar payload; errors when the tensor is not a single element.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Plain value transpose of a 2-d tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose wants rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Index of the largest element along the last axis, per leading index.
    pub fn argmax_last(&self) -> Vec<usize> {
        let last = *self.shape.last().unwrap_or(&1);
        assert!(last > 0, "argmax over empty axis");
        self.data
            .chunks(last)
            .map(|lane| {
                lane.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut a = ChaCha12Rng::seed_from_u64(7);
        let mut b = ChaCha12Rng::seed_from_u64(7);
        assert_eq!(
            Tensor::randn(&[3, 3], 1.0, &mut a).data(),
            Tensor::randn(&[3, 3], 1.0, &mut b).data()
        );
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let tt = t.transposed().unwrap().transposed().unwrap();
        assert_eq!(t, tt);
    }

    #[test]
    fn argmax_last_picks_max_per_lane() {
        let t = Tensor::from_vec(vec![2, 3], vec![0., 2., 1., 5., 4., 3.]).unwrap();
        assert_eq!(t.argmax_last(), vec![1, 0]);
    }
}
