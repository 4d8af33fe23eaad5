//! Reverse-mode autodiff core.
//!
//! A [`Tensor`] is a plain f32 value with shape; differentiable computation
//! happens on a [`graph::Graph`] rebuilt per forward pass (define-by-run).
//! Forward data is f32 throughout; gradient buffers accumulate in f64 so that
//! normalized gradient directions are stable to the last bit under loss
//! rescaling. Reductions use pairwise summation, which is deterministic and
//! keeps rounding error O(log n).

mod conv;
pub mod gradcheck;
pub mod graph;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use ops::BnBatchStats;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense f32 tensor. `grad` is filled by the trainer after backward passes
/// (already normalized when gradient normalization is on).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec".into() });
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    /// Gaussian init with the given standard deviation, marked trainable.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: true, grad: None }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Tensor {
        self.requires_grad = on;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Pairwise sum of f64 values; deterministic for a fixed input order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of f32 values, accumulated in f64.
pub(crate) fn pairwise_sum_f32(xs: &[f32]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().map(|&v| v as f64).sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum_f32(&xs[..mid]) + pairwise_sum_f32(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn scalar_shape_is_empty_with_one_element() {
        let t = Tensor::scalar(3.0);
        assert!(t.is_scalar());
        assert_eq!(t.numel(), 1);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        // Integer-valued inputs are summed exactly in f64, so pairwise order
        // cannot change the result.
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn pairwise_sum_is_accurate_on_adversarial_input() {
        // 1 followed by many tiny values: naive f32 summation would lose them.
        let mut xs = vec![1.0f32];
        xs.extend(std::iter::repeat(1e-8f32).take(1 << 16));
        let got = pairwise_sum_f32(&xs);
        let expect = 1.0 + (1 << 16) as f64 * 1e-8f32 as f64;
        assert!((got - expect).abs() < 1e-9, "got {got}, expected {expect}");
    }
}
