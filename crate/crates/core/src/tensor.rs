//! Dense row-major tensors.
//!
//! This is deliberately small: shapes, element access, a 2-D matmul that
//! accumulates in `f64`, a row softmax that understands `-inf` masks, and a
//! handful of pointwise maps. Every reduction runs in ascending index order so
//! results are bitwise reproducible regardless of who calls them or from how
//! many threads.

use std::fmt;

use num_like::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and arithmetic.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("row {row} has no finite entry; softmax is undefined")]
    DegenerateRow { row: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn dim_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Dimension { op, detail: detail.into() }
}

/// Runtime tag for the element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

mod num_like {
    /// The subset of float behaviour the kernels rely on.
    pub trait Float:
        Copy
        + Default
        + PartialOrd
        + Send
        + Sync
        + std::fmt::Debug
        + std::fmt::Display
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::AddAssign
        + std::ops::Neg<Output = Self>
        + 'static
    {
        fn exp(self) -> Self;
        fn sqrt(self) -> Self;
        fn is_finite(self) -> bool;
    }

    macro_rules! impl_float {
        ($t:ty) => {
            impl Float for $t {
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
            }
        };
    }
    impl_float!(f32);
    impl_float!(f64);
}

/// Element type of a [`Tensor`]: `f32` or `f64`.
pub trait Scalar: Float {
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f32::NEG_INFINITY;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f64::NEG_INFINITY;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `ln(1 + e^x)`, switching to the identity above 30 where the correction is
/// below `f64` resolution.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function; the derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise maps supported by [`Tensor::map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Exp,
    Softplus,
    AddScalar(f64),
    Scale(f64),
}

impl Elementwise {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Exp => x.exp(),
            Elementwise::Softplus => softplus(x),
            Elementwise::AddScalar(c) => x + c,
            Elementwise::Scale(c) => x * c,
        }
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("elem", &std::any::type_name::<S>())
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "new",
                format!("shape {shape:?} holds {n} elements but {} were supplied", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::ZERO)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("from_rows", "ragged rows"));
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        S::DTYPE
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank does not match tensor rank");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for shape {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[product(leading) x cols]`.
    pub fn rows(&self) -> usize {
        self.data
            .len()
            .checked_div(self.cols())
            .unwrap_or_else(|| self.shape[..self.shape.len().saturating_sub(1)].iter().product())
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(dim_err(op, format!("expected a 2-D tensor, got shape {other:?}"))),
        }
    }

    /// `c[i][j] = sum_p a[i][p] * b[p][j]`, accumulated in `f64` in ascending `p`.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.require_2d("matmul")?;
        let (k2, n) = other.require_2d("matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = Vec::with_capacity(m * n);
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let a = a.to_f64();
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in acc.iter_mut().zip(b_row) {
                    *c += a * b.to_f64();
                }
            }
            out.extend(acc.iter().map(|&x| S::from_f64(x)));
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (m, n) = self.require_2d("transpose")?;
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data })
    }

    /// Softmax along the last axis. `-inf` entries map to exactly `0`.
    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let cols = self.cols();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            softmax_in_place(row).map_err(|_| TensorError::DegenerateRow { row: r })?;
        }
        Ok(Tensor { shape: self.shape.clone(), data: out })
    }

    pub fn map(&self, f: Elementwise) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| S::from_f64(f.apply(x.to_f64()))).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(dim_err(
                "zip_with",
                format!("shapes differ: {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Sequential sum in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x.to_f64())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|&x| x.to_f64().abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// In-place softmax of one row. Fails when no entry is finite.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) -> std::result::Result<(), ()> {
    let mut max = S::NEG_INFINITY;
    for &x in row.iter() {
        if x.is_finite() && (max == S::NEG_INFINITY || x > max) {
            max = x;
        }
    }
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = S::ZERO;
    for x in row.iter_mut() {
        *x = if *x == S::NEG_INFINITY { S::ZERO } else { (*x - max).exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}
