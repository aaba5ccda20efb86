//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major buffers of `f32` or `f64`. Differentiable
//! programs are built on a [`Tape`](tape::Tape) that records a closed set of
//! primitive ops and replays them backward. All reductions accumulate left to
//! right so identical inputs produce bit-identical outputs.

pub mod adam;
pub mod fdcheck;
pub mod kernels;
pub mod tape;

pub use adam::{Adam, AdamCfg};
pub use fdcheck::finite_diff_check;
pub use tape::{ActKind, Gradients, NodeId, Op, Tape};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element type of a tensor: `f32` for speed, `f64` for verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Width in bits, for container manifests and diagnostics.
    const BITS: u32;

    fn from_f64_lossy(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32_lossy(x: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
    fn from_f32_lossy(x: f32) -> Self {
        x
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn from_f32_lossy(x: f32) -> Self {
        f64::from(x)
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor of rank 0, 1, or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
    requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    /// Build a tensor, checking that the shape product matches the data length.
    pub fn from_data(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_data",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![R::zero(); numel], requires_grad: false }
    }

    pub fn scalar(v: R) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn vector(data: Vec<R>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        Self::from_data(vec![rows, cols], data)
    }

    /// Mark this tensor as a differentiation target when used as a tape leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    /// Number of rows when interpreted as a matrix (rank 2 only).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns when interpreted as a matrix (rank 2 only).
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<R> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                detail: format!("expected 1 element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise cast to another precision.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// L2 norm, accumulated left to right.
    pub fn norm(&self) -> R {
        let mut acc = R::zero();
        for v in &self.data {
            acc = acc + *v * *v;
        }
        acc.sqrt()
    }
}
