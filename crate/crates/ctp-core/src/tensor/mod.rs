//! Dense 2-d tensors with reverse-mode gradients.
//!
//! Everything differentiable in the pipeline runs through [`tape::Tape`].
//! Values are `f32` in the production path; the same code runs in `f64`
//! for tight finite-difference gradient checks.

mod adam;
pub mod checkpoint;
pub mod layers;
pub mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{Checkpoint, ParamSet, Topology};
pub use tape::{BoundParams, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar element of a tensor. `f32` for training and inference, `f64`
/// for gradient testing.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max_of(self, other: Self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn max_of(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn max_of(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Guard for L2 normalization and cosine similarity: rows whose squared
/// norm is at or below this normalize to zero instead of dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major matrix. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor<T: Real> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length != rows*cols");
        Tensor {
            rows,
            cols,
            data: Arc::new(data),
            requires_grad: false,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![T::ZERO; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Single scalar value; panics if the tensor is not 1x1.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Replace one element, copying storage. Intended for tests and
    /// finite-difference probes, not hot paths.
    pub fn with_elem(&self, r: usize, c: usize, v: T) -> Tensor<T> {
        let mut data = self.data.as_ref().clone();
        data[r * self.cols + c] = v;
        let mut t = Tensor::new(self.rows, self.cols, data);
        t.requires_grad = self.requires_grad;
        t
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        let mut t = Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v.to_f64()).collect(),
        );
        t.requires_grad = self.requires_grad;
        t
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        let mut t = Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v.to_f64() as f32).collect(),
        );
        t.requires_grad = self.requires_grad;
        t
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64() == b.to_f64())
    }
}
