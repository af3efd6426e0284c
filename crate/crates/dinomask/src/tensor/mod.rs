//! Dense row-major tensors over `f32`/`f64` with reverse-mode autodiff.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! in `f64`. There is no implicit broadcasting: every operation states its
//! accepted shapes and anything else is a shape error.

pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use tape::{NodeId, Tape};

/// Element dtype tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`; provides the
/// GEMM kernel dispatch so the same model code runs in either precision.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c := alpha * a * b + beta * c` on raw row-major buffers with explicit
    /// strides. Backed by `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional array, contiguous row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Internal constructor for shapes known to be consistent.
    pub(crate) fn new_unchecked(data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_unchecked(vec![T::zero(); numel], shape)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new_unchecked(vec![value; numel], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(vec![value], vec![1])
    }

    /// Normal(0, std) initialization.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data = (0..numel)
            .map(|_| T::from_f64(dist.sample(rng)))
            .collect();
        Self::new_unchecked(data, shape)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for rank-0).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new_unchecked(
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            self.shape.clone(),
        )
    }

    /// Strict elementwise equality (same shape, same bits).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Temperature-scaled softmax along the last dimension, stabilized by
/// max-subtraction. Fails on non-positive temperature.
pub fn softmax_temp<T: Scalar>(x: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let cols = x.last_dim();
    let rows = x.numel() / cols.max(1);
    let mut out = vec![T::zero(); x.numel()];
    kernels::softmax_scaled_rows(x.data(), rows, cols, T::from_f64(1.0 / tau), &mut out);
    Ok(Tensor::new_unchecked(out, x.shape().to_vec()))
}

/// Stacks same-shape tensors along a new leading dimension.
pub fn stack<T: Scalar>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack: empty input".into()))?;
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "stack",
                format!("{:?}", first.shape()),
                format!("{:?}", t.shape()),
            ));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new_unchecked(data, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_shape() {
        assert!(Tensor::from_vec(vec![1.0f32, 2.0], vec![3]).is_err());
        let t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn softmax_temp_symmetry() {
        let x = Tensor::from_vec(vec![0.0f64, 0.0], vec![2]).unwrap();
        let p = softmax_temp(&x, 0.1).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_temp_analytic() {
        let x = Tensor::from_vec(vec![(2.0f64).ln(), 0.0], vec![2]).unwrap();
        let p = softmax_temp(&x, 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_temp_scaling_identity() {
        let a = softmax_temp(
            &Tensor::from_vec(vec![1.0f64, 0.0], vec![2]).unwrap(),
            0.5,
        )
        .unwrap();
        let b = softmax_temp(
            &Tensor::from_vec(vec![2.0f64, 0.0], vec![2]).unwrap(),
            1.0,
        )
        .unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn softmax_temp_rejects_bad_tau() {
        let x = Tensor::from_vec(vec![0.0f32], vec![1]).unwrap();
        assert!(softmax_temp(&x, 0.0).is_err());
        assert!(softmax_temp(&x, -1.0).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::from_vec(vec![1.5f32, -2.25, 0.125], vec![3]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert!(t.bit_eq(&back));
    }
}
