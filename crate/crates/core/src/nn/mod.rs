//! Dense tensors and a define-by-run reverse-mode autodiff engine.
//!
//! Everything here is row-major and generic over [`Real`], so the same
//! graph code runs in `f64` for verification and `f32` for training.

mod denormal;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod serialize;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use denormal::flush_denormals;
pub use graph::{log_sum_exp, rope_frequency, softmax, Graph, Var, LAYER_NORM_EPS};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub(crate) fn shape_err(op: &'static str, expected: impl Debug, got: impl Debug) -> NnError {
    NnError::Shape {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

/// Floating-point element type used by tensors and graphs.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into serialized tensor headers.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A B + beta * C` over strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: gemm::View<'_, Self>,
        b: gemm::View<'_, Self>,
        beta: Self,
        c: gemm::ViewMut<'_, Self>,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: gemm::View<'_, f32>,
        b: gemm::View<'_, f32>,
        beta: f32,
        c: gemm::ViewMut<'_, f32>,
    ) {
        gemm::sgemm(m, k, n, alpha, a, b, beta, c)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: gemm::View<'_, f64>,
        b: gemm::View<'_, f64>,
        beta: f64,
        c: gemm::ViewMut<'_, f64>,
    ) {
        gemm::dgemm(m, k, n, alpha, a, b, beta, c)
    }
}

pub use gemm::{View, ViewMut};

/// Row-major dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, NnError> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(shape_err("tensor", numel, values.len()));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            values: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// A 1-D tensor.
    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    /// A 2-D tensor from nested rows; all rows must share a length.
    pub fn matrix(rows: &[Vec<T>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(shape_err("matrix", cols, bad.len()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Length of the trailing axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stores a gradient, checking it matches the value shape.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), NnError> {
        if grad.len() != self.values.len() {
            return Err(shape_err("set_grad", self.values.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Converts element type, e.g. an `f32` training checkpoint to `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.as_f64())).collect()),
        }
    }
}

/// Plain row-major matrix product, used where no graph is needed.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        View::row_major(a.values(), k),
        View::row_major(b.values(), n),
        T::zero(),
        ViewMut::row_major(&mut out, n),
    );
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn set_grad_checks_shape() {
        let mut t = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.0f32; 4][..]));
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::matrix(&[vec![3.0], vec![-2.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), &[3.0, -2.0]);
    }

    #[test]
    fn matmul_zero_row() {
        let a = Tensor::<f64>::zeros(vec![1, 3]);
        let b = Tensor::from_fn(vec![3, 4], |i| i as f64 - 5.5);
        let c = matmul(&a, &b).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(NnError::Shape { .. })));
    }
}
