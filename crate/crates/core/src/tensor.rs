//! Dense row-major tensors over a selectable element type.
//!
//! Training runs in `f32`; the `f64` instantiation exists for gradient
//! verification against finite differences. Group-structured data keeps each
//! group's channel block contiguous along the channel axis, so a packed
//! activation `[batch, G·c]` is the plain concatenation of the per-group
//! activations `[batch, c]`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
///
/// Transcendental functions go through `libm` so that results are identical
/// under `std` and `no_std` builds.
pub trait Elem:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn max_of(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn abs(self) -> Self {
        libm::fabsf(self)
    }
    fn max_of(self, other: Self) -> Self {
        if self > other { self } else { other }
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn abs(self) -> Self {
        libm::fabs(self)
    }
    fn max_of(self, other: Self) -> Self {
        if self > other { self } else { other }
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense row-major tensor. Element count always equals the product of the
/// shape extents.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                axis: "elements",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![E::ZERO; numel] }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// A rank-0-like scalar stored as shape `[1]`.
    pub fn scalar(value: E) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Same data, different shape. Extent product must be unchanged.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Exact elementwise equality, bit-for-bit on the numeric values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Columns `[start, start+len)` of a `[rows, cols]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                message: alloc::format!("expected a 2-d tensor, got rank {}", self.shape.len()),
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if start + len > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                axis: "columns",
                expected: cols,
                got: start + len,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Tensor::new(&[rows, len], data)
    }

    /// Elementwise mean of same-shaped tensors, summed in argument order.
    pub fn mean_of(parts: &[&Tensor<E>]) -> Result<Self> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "mean_of",
            message: alloc::string::String::from("empty input list"),
        })?;
        let mut acc = Tensor::zeros(first.shape());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mean_of",
                    axis: "elements",
                    expected: first.numel(),
                    got: p.numel(),
                });
            }
            for (a, &v) in acc.data.iter_mut().zip(p.data.iter()) {
                *a += v;
            }
        }
        let inv = E::ONE / E::from_f64(parts.len() as f64);
        for a in acc.data.iter_mut() {
            *a *= inv;
        }
        Ok(acc)
    }
}

impl<E: Elem> Debug for Tensor<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { expected: 6, got: 5, .. }));
    }

    #[test]
    fn slice_cols_extracts_contiguous_block() {
        let t = Tensor::new(&[2, 4], vec![0.0f32, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let s = t.slice_cols(1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 11.0, 12.0]);
    }

    #[test]
    fn mean_of_sums_in_order() {
        let a = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![3.0f32, 6.0]).unwrap();
        let m = Tensor::mean_of(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0]);
    }
}
