//! Dense row-major tensors generic over element precision.
//!
//! Training runs at single precision; gradient checks and the loss-formula
//! oracles run at double precision, so everything numeric is generic over
//! [`Scalar`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element precision of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Floating-point element of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Debug
    + Display
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Run `f` over a reused thread-local scratch buffer of at least `len`
    /// elements. Contents are unspecified on entry; kernels that need zeros
    /// must clear the region themselves.
    fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $scratch:ident) => {
        thread_local! {
            static $scratch: std::cell::RefCell<Vec<$t>> = const { std::cell::RefCell::new(Vec::new()) };
        }

        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maxv(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline(always)]
            fn minv(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
                // take the buffer out so nested calls fall back to a fresh
                // allocation instead of a double borrow
                let mut buf = $scratch.with(|cell| std::mem::take(&mut *cell.borrow_mut()));
                if buf.len() < len {
                    buf.resize(len, 0.0);
                }
                let out = f(&mut buf[..len]);
                $scratch.with(|cell| {
                    let mut slot = cell.borrow_mut();
                    if slot.len() < buf.len() {
                        *slot = buf;
                    }
                });
                out
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, SCRATCH_F32);
impl_scalar!(f64, Precision::Double, SCRATCH_F64);

/// Dense n-dimensional array in row-major order.
///
/// A rank-0 tensor (empty shape) is a scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.rank() <= 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Cast to another precision, element by element.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Rowwise dot product of two equal-shape tensors along the last axis.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// L2-normalize a slice in place; returns the original norm. Inputs with
/// norm <= eps are zeroed (guarded degenerate path).
pub fn l2_normalize_slice<T: Scalar>(v: &mut [T], eps: T) -> T {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm.to_f64() <= eps.to_f64() {
        for x in v.iter_mut() {
            *x = T::ZERO;
        }
    } else {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}
