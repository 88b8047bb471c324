//! Dense tensor foundation: shapes, contiguous last-dim-fastest storage,
//! seeded fills and double-accumulated dot products.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating-point precision of a tensor. Single is the production path;
/// double backs the oracle and gradient-check paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Scalar element type. Implemented for `f32` and `f64`.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    const PRECISION: Precision;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty, $p:expr) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const PRECISION: Precision = $p;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_real!(f32, Precision::Single);
impl_real!(f64, Precision::Double);

/// Tensor shape with 1 to 4 dimensions, each at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    numel: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::shape(format!(
                "expected 1 to 4 dimensions, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {pos} is zero in {dims:?}")));
        }
        let mut numel: u64 = 1;
        for &d in dims {
            numel = numel
                .checked_mul(d as u64)
                .ok_or_else(|| Error::Size(format!("element count of {dims:?} overflows u64")))?;
        }
        let numel = usize::try_from(numel)
            .map_err(|_| Error::Size(format!("element count of {dims:?} overflows usize")))?;
        Ok(Self {
            dims: dims.to_vec(),
            numel,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.numel
    }

    /// Row-major strides (last dimension has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for d in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.dims[d + 1];
        }
        strides
    }

    /// Linear offset of a multi-index, or `None` if it is out of bounds.
    pub fn linearize(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.dims.len() {
            return None;
        }
        let mut offset = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return None;
            }
            offset = offset * d + i;
        }
        Some(offset)
    }

    /// Inverse of [`Shape::linearize`].
    pub fn delinearize(&self, mut offset: usize) -> Option<Vec<usize>> {
        if offset >= self.numel {
            return None;
        }
        let mut index = vec![0; self.dims.len()];
        for d in (0..self.dims.len()).rev() {
            index[d] = offset % self.dims[d];
            offset /= self.dims[d];
        }
        Some(index)
    }
}

/// Seeded generator: ChaCha8 keyed through `SeedableRng::seed_from_u64`.
/// The output stream depends only on the seed, never on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let t: f64 = self.inner.random();
        lo + (hi - lo) * t
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform_vec<T: Real>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..n).map(|_| T::from_f64(self.uniform(lo, hi))).collect()
    }
}

/// Initial contents for [`DenseTensor::new`].
pub enum Fill<'a> {
    Zeros,
    Constant(f64),
    SeededUniform { rng: &'a mut Rng, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> DenseTensor<T> {
    pub fn new(dims: &[usize], fill: Fill<'_>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match fill {
            Fill::Zeros => vec![T::ZERO; n],
            Fill::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::Contract(format!("constant fill {v} is not finite")));
                }
                vec![T::from_f64(v); n]
            }
            Fill::SeededUniform { rng, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Range(format!("invalid uniform range [{lo}, {hi})")));
                }
                rng.uniform_vec(n, lo, hi)
            }
        };
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, Fill::Zeros)
    }

    /// Wraps existing data; rejects length mismatches and non-finite values.
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite value at offset {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output is finite by construction.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.shape.linearize(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Contract(format!("non-finite value {value}")));
        }
        let o = self
            .shape
            .linearize(index)
            .ok_or_else(|| Error::shape(format!("index {index:?} out of bounds for {:?}", self.dims())))?;
        self.data[o] = value;
        Ok(())
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot combine {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }
}

/// `Σ a[c]·b[c]` accumulated in double precision.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "dot of length {} with length {}",
            a.len(),
            b.len()
        )));
    }
    Ok(T::from_f64(dot_f64(a, b)))
}

/// Unchecked accumulation used by the kernels. Each product is formed in
/// double precision and summed in index order, so `dot(a, b) == dot(b, a)`
/// bit for bit.
#[inline]
pub(crate) fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}
