//! Dense `(N, C, H, W)` tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::error::{Dim, Error, Result};

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// A matrix is stored as `(1, 1, rows, cols)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(1, 1, rows, cols)
    }

    pub const fn volume(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_matrix(&self) -> bool {
        self.n == 1 && self.c == 1
    }

    pub fn get(&self, dim: Dim) -> usize {
        match dim {
            Dim::Batch => self.n,
            Dim::Channels => self.c,
            Dim::Height => self.h,
            Dim::Width => self.w,
        }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for dim in [Dim::Batch, Dim::Channels, Dim::Height, Dim::Width] {
            if self.get(dim) == 0 {
                return Err(Error::EmptyDim(dim));
            }
        }
        Ok(())
    }

    /// Fails with a [`Error::ShapeMismatch`] naming the first differing axis.
    pub fn expect(&self, op: &'static str, expected: &Shape) -> Result<()> {
        for dim in [Dim::Batch, Dim::Channels, Dim::Height, Dim::Width] {
            if self.get(dim) != expected.get(dim) {
                return Err(Error::ShapeMismatch {
                    op,
                    dim,
                    expected: expected.get(dim),
                    found: self.get(dim),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.volume() {
            return Err(Error::DataLength {
                expected: shape.volume(),
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.volume()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Matrix from row-major rows; all rows must have equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(Shape::matrix(rows.len(), cols), data)
    }

    /// Identity matrix of size `n`, as `(1, 1, n, n)`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(Shape::matrix(n, n));
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.volume());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.volume()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.shape.offset(n, c, y, x);
        &mut self.data[i]
    }

    /// Value of a `(1, 1, 1, 1)` tensor (or the first element otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.volume() != self.shape.volume() {
            return Err(Error::DataLength {
                expected: shape.volume(),
                found: self.data.len(),
            });
        }
        shape.validate()?;
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        other.shape.expect("zip_map", &self.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel plane `(n, c)` as a contiguous slice of `H * W` values.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }
}
