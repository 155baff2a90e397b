//! Dense row-major matrices. Vectors are stored as `1×q` rows.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(alloc::format!(
                "tensor dimensions must be positive, got [{rows}x{cols}]"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Contract(alloc::format!(
                "[{rows}x{cols}] tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: Shape::new(rows, cols),
            data,
        })
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn row_vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1),
            data: vec![x],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            shape: Shape::new(rows, cols),
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let Shape { rows, cols } = self.shape;
        let mut out = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                out.push(self.data[r * cols + c]);
            }
        }
        Tensor {
            shape: Shape::new(cols, rows),
            data: out,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.shape.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: Shape::new(idx.len(), c),
            data,
        }
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape,
                rhs: rhs.shape,
            });
        }
        let mut out = vec![T::zero(); self.rows() * rhs.cols()];
        gemm_nn(&self.data, &rhs.data, &mut out, self.rows(), self.cols(), rhs.cols());
        Tensor::new(self.rows(), rhs.cols(), out)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// `out += a · b` with `a: n×p`, `b: p×q`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let orow = &mut out[i * q..(i + 1) * q];
        let arow = &a[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: n×q`, `b: p×q`, `out: n×p`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, q: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * q..(i + 1) * q];
        for k in 0..p {
            out[i * p + k] += dot(arow, &b[k * q..(k + 1) * q]);
        }
    }
}

/// `out += aᵀ · b` with `a: n×p`, `b: n×q`, `out: p×q`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, p: usize, q: usize) {
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        let brow = &b[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent lanes so the compiler can vectorize the reduction.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}
