//! Dense row-major tensors over `f32` (training) or `f64` (exactness checks).
//!
//! Everything in the lab — latents, noise predictions, splat parameters,
//! network weights — lives in these flat buffers. The op set is deliberately
//! small: elementwise arithmetic, a few matmul variants for the MLP, and
//! reductions. No broadcasting beyond what the named ops state.

use crate::error::{Error, Result};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Element type of a [`Tensor`]: `f32` for 32-bit runs, `f64` for the 64-bit
/// exactness mode. Deliberately not a full float abstraction — only the
/// handful of operations the kernels perform element-wise; everything else
/// goes through `to_f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + Default
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn is_finite(self) -> bool;
    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    const DTYPE: &'static str = "f64";
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, panicking if the shape does not match the data length.
    /// Shape mismatch here is a programming error, not a recoverable state.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    /// Checked construction: rejects shape mismatch and non-finite values.
    pub fn checked(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "checked",
                format!("shape {:?} vs data length {}", shape, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v])
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape to {:?} changes length", shape);
        self.shape = shape;
        self
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|v| v * c)
    }

    /// a + c*b in one pass.
    pub fn add_scaled(&self, other: &Self, c: S) -> Self {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    /// Sum of squares, accumulated in f64 regardless of element type.
    pub fn norm_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    /// ‖a − b‖ / max(‖b‖, floor). The floor keeps the ratio meaningful when
    /// the reference is (near) zero.
    pub fn rel_err(&self, reference: &Self) -> f64 {
        let diff = self.sub(reference).norm();
        diff / reference.norm().max(1e-300)
    }

    // ---- 2-D ops for the MLP ----

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape)))
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Tensor::new(vec![m, n], out))
    }

    /// `[m,k] x [n,k]^T -> [m,n]` — the natural layout for `x · Wᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = other.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape, other.shape),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc = acc + a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor::new(vec![m, n], out))
    }

    /// `[m,n]^T x [m,k] -> [n,k]` — gradient layout `gᵀ · x`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (m, n) = self.dims2("matmul_tn")?;
        let (m2, k) = other.dims2("matmul_tn")?;
        if m != m2 {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![S::zero(); n * k];
        for i in 0..m {
            let g_row = &self.data[i * n..(i + 1) * n];
            let x_row = &other.data[i * k..(i + 1) * k];
            for (j, &g) in g_row.iter().enumerate() {
                if g == S::zero() {
                    continue;
                }
                let o_row = &mut out[j * k..(j + 1) * k];
                for (o, &x) in o_row.iter_mut().zip(x_row) {
                    *o = *o + g * x;
                }
            }
        }
        Ok(Tensor::new(vec![n, k], out))
    }

    /// Sums a `[m,n]` tensor over rows, producing `[n]`.
    pub fn col_sum(&self) -> Result<Self> {
        let (m, n) = self.dims2("col_sum")?;
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(Tensor::new(vec![n], out))
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = *self.shape.last().expect("row on 0-d tensor");
        &self.data[i * n..(i + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_rejects_nan() {
        let err = Tensor::<f32>::checked(vec![2], vec![1.0, f32::NAN]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        let err = Tensor::<f32>::checked(vec![3], vec![1.0, 2.0]);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        // a · bᵀ via matmul_nt with b stored transposed
        let bt = Tensor::<f64>::new(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]);
        let c2 = a.matmul_nt(&bt).unwrap();
        assert_eq!(c.data(), c2.data());

        // aᵀ · a via matmul_tn
        let g = a.matmul_tn(&a).unwrap();
        assert_eq!(g.shape(), &[3, 3]);
        assert_eq!(g.data()[0], 1. * 1. + 4. * 4.);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![1., 2., 3., 4.]);
        let r = t.clone().reshape(vec![4]);
        assert_eq!(r.data(), t.data());
    }
}
