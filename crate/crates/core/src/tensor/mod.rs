//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type (shape + `f64` storage). Differentiable
//! computation goes through a [`Graph`], which records executed operations in
//! topological order and replays them backwards on [`Graph::backward`]. The
//! graph also owns the [`CostLedger`] that counts multiply-accumulates per
//! layer scope.

mod graph;
mod kernels;
mod ledger;
#[cfg(test)]
mod op_tests;
mod rng;

pub use graph::{Graph, PadMode, Var};
pub use ledger::CostLedger;
pub use rng::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// Computation runs at 64-bit precision; values that cross a serialization
/// boundary (checkpoints, cube files) are kept on the binary32 grid via
/// [`Tensor::snap_f32`] so round-trips are bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_f32(shape: &[usize], values: &[f32]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Reorder axes: output axis `k` is input axis `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        kernels::permute(self, perm)
    }

    /// Round every element to the nearest binary32 value.
    pub fn snap_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Maximum absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn identity_diagonal() {
        let t = Tensor::identity(3);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[4], 1.0);
        assert_eq!(t.data()[8], 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn snap_f32_is_idempotent() {
        let mut t = Tensor::new(vec![3], vec![0.1, 1.0 / 3.0, -std::f64::consts::E]).unwrap();
        t.snap_f32();
        let once = t.clone();
        t.snap_f32();
        assert_eq!(t, once);
    }
}
