//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation executed during one forward pass.
//! Parameters are referenced from a [`ParamStore`] without copying; bag
//! features can be borrowed as constants. [`Tape::backward`] walks the
//! record in reverse and *adds* parameter gradients into a [`Gradients`]
//! buffer, so repeated backward passes accumulate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{dot, gemm_nt, gemm_tn, Shape, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Axis along which a normalization or reduction runs. `Rows` runs down
/// each column (over the instance axis), `Cols` runs across each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softmax(Axis),
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" | "softmax:1" => Ok(Activation::Softmax(Axis::Cols)),
            "softmax:0" => Ok(Activation::Softmax(Axis::Rows)),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    RSub(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
    AbsSum(Var),
    Softmax(Var, Axis),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CumProd(Var),
    Pick(Var, usize),
    SeqConv(Var, Var),
    DwConv2d {
        x: Var,
        weight: Var,
        bias: Var,
        side: usize,
        kernel: usize,
    },
    PinvInit {
        x: Var,
        row: usize,
        col: usize,
        row_sum: T,
        col_sum: T,
    },
    IdentityMinus(Var),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    shape: Shape,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'a, T> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
}

fn dim_err(op: &'static str, lhs: Shape, rhs: Shape) -> Error {
    Error::Dimension { op, lhs, rhs }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape: value.shape(),
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            shape: self.params.get(id).shape(),
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape(),
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant borrowed for the lifetime of the tape (no copy).
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape(),
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// `x · weight + bias`, with the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×q` row to every row of an `n×q` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(dim_err("add_row", ta.shape(), tr.shape()));
        }
        let q = ta.cols();
        let mut out = ta.clone();
        for r in out.data_mut().chunks_mut(q) {
            for (o, &b) in r.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `c - a`, elementwise.
    pub fn rsub(&mut self, c: T, a: Var) -> Var {
        let out = self.value(a).map(|x| c - x);
        self.push(out, Op::RSub(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x.is_nan() { x } else { x.max(T::zero()) });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    /// NaN passes through.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| if x.is_nan() { x } else { x.max(lo).min(hi) });
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Sum of absolute values, as a `1×1` tensor.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, x| s + x.abs());
        self.push(Tensor::scalar(s), Op::AbsSum(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let (n, q) = (t.rows(), t.cols());
        let mut out = t.clone();
        let d = out.data_mut();
        match axis {
            Axis::Cols => {
                for row in d.chunks_mut(q) {
                    softmax_strided(row, 0, 1, q);
                }
            }
            Axis::Rows => {
                for c in 0..q {
                    softmax_strided(d, c, q, n);
                }
            }
        }
        self.push(out, Op::Softmax(a, axis), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Softmax(axis) => self.softmax(a, axis),
        }
    }

    /// Column-wise mean or max over the instance (row) axis, giving `1×q`.
    /// Max routes its gradient to the first maximal row of each column.
    pub fn reduce_rows(&mut self, a: Var, kind: Reduce) -> Result<Var> {
        let t = self.value(a);
        let (n, q) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::EmptyBag);
        }
        match kind {
            Reduce::Mean => {
                let mut out = vec![T::zero(); q];
                for row in t.data().chunks(q) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                let inv = T::one() / T::lit(n as f64);
                out.iter_mut().for_each(|o| *o *= inv);
                let out = Tensor::new(1, q, out)?;
                Ok(self.push(out, Op::MeanRows(a), &[a]))
            }
            Reduce::Max => {
                let mut arg = vec![0usize; q];
                let mut out = t.row(0).to_vec();
                for r in 1..n {
                    for (c, &x) in t.row(r).iter().enumerate() {
                        if x > out[c] {
                            out[c] = x;
                            arg[c] = r;
                        }
                    }
                }
                let out = Tensor::new(1, q, out)?;
                Ok(self.push(out, Op::MaxRows(a, arg), &[a]))
            }
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Row-wise layer normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let (n, q) = (t.rows(), t.cols());
        for p in [gain, shift] {
            let s = self.shape(p);
            if s != Shape::new(1, q) {
                return Err(dim_err("layer_norm", t.shape(), s));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(shift).data());
        let qf = T::lit(q as f64);
        let mut xhat = Vec::with_capacity(n * q);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * q);
        for row in t.data().chunks(q) {
            let mean = row.iter().copied().sum::<T>() / qf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / qf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let out = Tensor::new(n, q, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Contract(format!(
                "row index {bad} out of range for {}",
                t.shape()
            )));
        }
        let out = t.select_rows(&idx);
        Ok(self.push(out, Op::GatherRows(a, idx), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let q = self.shape(parts[0]).cols;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != q {
                return Err(dim_err("concat_rows", self.shape(parts[0]), t.shape()));
            }
            data.extend_from_slice(t.data());
            n += t.rows();
        }
        let out = Tensor::new(n, q, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(a);
        if width == 0 || start + width > t.cols() {
            return Err(Error::Contract(format!(
                "column slice {start}..{} out of range for {}",
                start + width,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * width);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + width]);
        }
        let out = Tensor::new(t.rows(), width, data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).rows;
        let mut q = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rows != n {
                return Err(dim_err("concat_cols", self.shape(parts[0]), s));
            }
            q += s.cols;
        }
        let mut data = Vec::with_capacity(n * q);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(n, q, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Running product along each row.
    pub fn cumprod(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let q = out.cols();
        for row in out.data_mut().chunks_mut(q) {
            for j in 1..q {
                row[j] = row[j - 1] * row[j];
            }
        }
        self.push(out, Op::CumProd(a), &[a])
    }

    /// Element `(r, c)` as a `1×1` tensor.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows() || c >= t.cols() {
            return Err(Error::Contract(format!("pick ({r},{c}) out of range for {}", t.shape())));
        }
        let flat = r * t.cols() + c;
        let out = Tensor::scalar(t.data()[flat]);
        Ok(self.push(out, Op::Pick(a, flat), &[a]))
    }

    /// Same-padded 1-D convolution along the row (sequence) axis with one
    /// shared `1×K` kernel applied to every column. `K` must be odd.
    pub fn seq_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, w) = (self.value(x), self.value(kernel));
        if w.rows() != 1 || w.cols() % 2 == 0 {
            return Err(dim_err("seq_conv", t.shape(), w.shape()));
        }
        let (n, q, k) = (t.rows(), t.cols(), w.cols());
        let pad = k / 2;
        let mut out = vec![T::zero(); n * q];
        for i in 0..n {
            let orow = &mut out[i * q..(i + 1) * q];
            for (tap, &wt) in w.data().iter().enumerate() {
                let Some(src) = (i + tap).checked_sub(pad).filter(|&s| s < n) else {
                    continue;
                };
                for (o, &v) in orow.iter_mut().zip(t.row(src)) {
                    *o += wt * v;
                }
            }
        }
        let out = Tensor::new(n, q, out)?;
        Ok(self.push(out, Op::SeqConv(x, kernel), &[x, kernel]))
    }

    /// Depthwise same-padded 2-D convolution. Rows of `x` are the cells of
    /// a `side×side` grid in row-major order and columns are channels;
    /// `weight` is `C×(k·k)` and `bias` is `1×C`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, bias: Var, side: usize) -> Result<Var> {
        let (t, w, b) = (self.value(x), self.value(weight), self.value(bias));
        let c = t.cols();
        if t.rows() != side * side {
            return Err(Error::Contract(format!(
                "depthwise_conv2d: {} rows do not form a {side}x{side} grid",
                t.rows()
            )));
        }
        let kernel = libm::sqrt(w.cols() as f64) as usize;
        if w.rows() != c || kernel * kernel != w.cols() || kernel.is_multiple_of(2) {
            return Err(dim_err("depthwise_conv2d", t.shape(), w.shape()));
        }
        if b.shape() != Shape::new(1, c) {
            return Err(dim_err("depthwise_conv2d", t.shape(), b.shape()));
        }
        let pad = kernel / 2;
        let mut out = Vec::with_capacity(side * side * c);
        for _ in 0..side * side {
            out.extend_from_slice(b.data());
        }
        for (i, j, di, dj, src) in conv_taps(side, kernel, pad) {
            let dst = i * side + j;
            let tap = di * kernel + dj;
            for ch in 0..c {
                out[dst * c + ch] += w.data()[ch * kernel * kernel + tap] * t.data()[src * c + ch];
            }
        }
        let out = Tensor::new(side * side, c, out)?;
        Ok(self.push(
            out,
            Op::DwConv2d {
                x,
                weight,
                bias,
                side,
                kernel,
            },
            &[x, weight, bias],
        ))
    }

    /// Initial iterate of the Newton-Schulz pseudo-inverse:
    /// `xᵀ / (max_i Σ_j |x_ij| · max_j Σ_i |x_ij|)`.
    pub fn pinv_init(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, q) = (t.rows(), t.cols());
        let (mut row, mut row_sum) = (0, T::neg_infinity());
        for r in 0..n {
            let s = t.row(r).iter().fold(T::zero(), |s, v| s + v.abs());
            if s > row_sum {
                row_sum = s;
                row = r;
            }
        }
        let (mut col, mut col_sum) = (0, T::neg_infinity());
        for c in 0..q {
            let s = (0..n).fold(T::zero(), |s, r| s + t.get(r, c).abs());
            if s > col_sum {
                col_sum = s;
                col = c;
            }
        }
        let denom = row_sum * col_sum;
        let out = t.transpose().map(|v| v / denom);
        self.push(
            out,
            Op::PinvInit {
                x,
                row,
                col,
                row_sum,
                col_sum,
            },
            &[x],
        )
    }

    /// `c·I − x` for square `x`.
    pub fn identity_minus(&mut self, c: T, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != t.cols() {
            return Err(dim_err("identity_minus", t.shape(), t.shape().transpose()));
        }
        let n = t.rows();
        let mut out = t.map(|v| -v);
        for i in 0..n {
            out.data_mut()[i * n + i] += c;
        }
        Ok(self.push(out, Op::IdentityMinus(x), &[x]))
    }

    /// Accumulates `d loss / d param` into `grads` for every parameter leaf
    /// reachable from `loss`. Gradients add to whatever `grads` holds.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        if self.shape(loss) != Shape::new(1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, &gy, &mut g, grads);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, gy: &[T], g: &mut [Option<Vec<T>>], grads: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        match &node.op {
            Op::Leaf => {
                if let Value::Param(id) = node.value {
                    grads.accumulate(id, gy);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(g, *a) {
                    gemm_nt(gy, tb.data(), ga, n, q, p);
                }
                if let Some(gb) = self.slot(g, *b) {
                    gemm_tn(ta.data(), gy, gb, n, p, q);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.rows(), y.cols());
                if let Some(ga) = self.slot(g, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += gy[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.each(g, *a, |k, v| *v += gy[k]);
                self.each(g, *b, |k, v| *v += gy[k]);
            }
            Op::Sub(a, b) => {
                self.each(g, *a, |k, v| *v += gy[k]);
                self.each(g, *b, |k, v| *v -= gy[k]);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.each(g, *a, |k, v| *v += gy[k] * tb[k]);
                self.each(g, *b, |k, v| *v += gy[k] * ta[k]);
            }
            Op::AddRow(a, row) => {
                self.each(g, *a, |k, v| *v += gy[k]);
                let q = y.cols();
                if let Some(gr) = self.slot(g, *row) {
                    for chunk in gy.chunks(q) {
                        for (o, &d) in gr.iter_mut().zip(chunk) {
                            *o += d;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.each(g, *a, |k, v| *v += gy[k] * *c),
            Op::AddScalar(a) => self.each(g, *a, |k, v| *v += gy[k]),
            Op::RSub(a) | Op::IdentityMinus(a) => self.each(g, *a, |k, v| *v -= gy[k]),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.each(g, *a, |k, v| {
                    if x[k] > T::zero() {
                        *v += gy[k]
                    }
                });
            }
            Op::Tanh(a) => {
                let yd = y.data();
                self.each(g, *a, |k, v| *v += gy[k] * (T::one() - yd[k] * yd[k]));
            }
            Op::Sigmoid(a) => {
                let yd = y.data();
                self.each(g, *a, |k, v| *v += gy[k] * yd[k] * (T::one() - yd[k]));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.each(g, *a, |k, v| *v += gy[k] / x[k]);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.each(g, *a, |k, v| {
                    if x[k] >= *lo && x[k] <= *hi {
                        *v += gy[k]
                    }
                });
            }
            Op::AbsSum(a) => {
                let x = self.value(*a).data();
                let s = gy[0];
                self.each(g, *a, |k, v| {
                    if x[k] > T::zero() {
                        *v += s
                    } else if x[k] < T::zero() {
                        *v -= s
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (n, q) = (y.rows(), y.cols());
                let yd = y.data();
                if let Some(ga) = self.slot(g, *a) {
                    match axis {
                        Axis::Cols => {
                            for r in 0..n {
                                let s = dot(&gy[r * q..(r + 1) * q], &yd[r * q..(r + 1) * q]);
                                for c in 0..q {
                                    let k = r * q + c;
                                    ga[k] += yd[k] * (gy[k] - s);
                                }
                            }
                        }
                        Axis::Rows => {
                            for c in 0..q {
                                let s = (0..n).fold(T::zero(), |s, r| s + gy[r * q + c] * yd[r * q + c]);
                                for r in 0..n {
                                    let k = r * q + c;
                                    ga[k] += yd[k] * (gy[k] - s);
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                let q = y.cols();
                let inv = T::one() / T::lit(self.shape(*a).rows as f64);
                self.each(g, *a, |k, v| *v += gy[k % q] * inv);
            }
            Op::MaxRows(a, arg) => {
                let q = y.cols();
                if let Some(ga) = self.slot(g, *a) {
                    for (c, &r) in arg.iter().enumerate() {
                        ga[r * q + c] += gy[c];
                    }
                }
            }
            Op::Sum(a) => self.each(g, *a, |_, v| *v += gy[0]),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let q = y.cols();
                let gain_v = self.value(*gain).data();
                if let Some(gg) = self.slot(g, *gain) {
                    for (gr, hr) in gy.chunks(q).zip(xhat.chunks(q)) {
                        for c in 0..q {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gs) = self.slot(g, *shift) {
                    for gr in gy.chunks(q) {
                        for c in 0..q {
                            gs[c] += gr[c];
                        }
                    }
                }
                if let Some(gx) = self.slot(g, *x) {
                    let qf = T::lit(q as f64);
                    let mut gh = vec![T::zero(); q];
                    for (r, (gr, hr)) in gy.chunks(q).zip(xhat.chunks(q)).enumerate() {
                        for c in 0..q {
                            gh[c] = gr[c] * gain_v[c];
                        }
                        let s1: T = gh.iter().copied().sum();
                        let s2 = dot(&gh, hr);
                        let k = inv_std[r] / qf;
                        for c in 0..q {
                            gx[r * q + c] += k * (qf * gh[c] - s1 - hr[c] * s2);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => self.each(g, *a, |k, v| *v += gy[k] * mask[k]),
            Op::GatherRows(a, idx) => {
                let q = y.cols();
                if let Some(ga) = self.slot(g, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..q {
                            ga[src * q + c] += gy[r * q + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.shape(p).len();
                    self.each(g, p, |k, v| *v += gy[off + k]);
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (w, q) = (y.cols(), self.shape(*a).cols);
                if let Some(ga) = self.slot(g, *a) {
                    for r in 0..y.rows() {
                        for c in 0..w {
                            ga[r * q + start + c] += gy[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let q = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).cols;
                    self.each(g, p, |k, v| *v += gy[(k / w) * q + off + k % w]);
                    off += w;
                }
            }
            Op::CumProd(a) => {
                let q = y.cols();
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(g, *a) {
                    for r in 0..y.rows() {
                        let xr = &x[r * q..(r + 1) * q];
                        for k in 0..q {
                            // d y_j / d x_k = prod_{i<=j, i!=k} x_i for j >= k
                            let mut prefix = T::one();
                            for &xi in &xr[..k] {
                                prefix *= xi;
                            }
                            let mut acc = T::zero();
                            let mut run = prefix;
                            for j in k..q {
                                if j > k {
                                    run *= xr[j];
                                }
                                acc += gy[r * q + j] * run;
                            }
                            ga[r * q + k] += acc;
                        }
                    }
                }
            }
            Op::Pick(a, flat) => {
                if let Some(ga) = self.slot(g, *a) {
                    ga[*flat] += gy[0];
                }
            }
            Op::SeqConv(x, kernel) => {
                let (t, w) = (self.value(*x), self.value(*kernel));
                let (n, q, k) = (t.rows(), t.cols(), w.cols());
                let pad = k / 2;
                if let Some(gw) = self.slot(g, *kernel) {
                    for i in 0..n {
                        for (tap, slot) in gw.iter_mut().enumerate() {
                            if let Some(src) = (i + tap).checked_sub(pad).filter(|&s| s < n) {
                                *slot += dot(&gy[i * q..(i + 1) * q], t.row(src));
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(g, *x) {
                    for i in 0..n {
                        for (tap, &wt) in w.data().iter().enumerate() {
                            if let Some(src) = (i + tap).checked_sub(pad).filter(|&s| s < n) {
                                for c in 0..q {
                                    gx[src * q + c] += wt * gy[i * q + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::DwConv2d {
                x,
                weight,
                bias,
                side,
                kernel,
            } => {
                let (t, w) = (self.value(*x), self.value(*weight));
                let c = t.cols();
                let kk = kernel * kernel;
                let pad = kernel / 2;
                if let Some(gb) = self.slot(g, *bias) {
                    for row in gy.chunks(c) {
                        for ch in 0..c {
                            gb[ch] += row[ch];
                        }
                    }
                }
                if let Some(gw) = self.slot(g, *weight) {
                    for (i, j, di, dj, src) in conv_taps(*side, *kernel, pad) {
                        let dst = i * side + j;
                        let tap = di * kernel + dj;
                        for ch in 0..c {
                            gw[ch * kk + tap] += gy[dst * c + ch] * t.data()[src * c + ch];
                        }
                    }
                }
                if let Some(gx) = self.slot(g, *x) {
                    for (i, j, di, dj, src) in conv_taps(*side, *kernel, pad) {
                        let dst = i * side + j;
                        let tap = di * kernel + dj;
                        for ch in 0..c {
                            gx[src * c + ch] += gy[dst * c + ch] * w.data()[ch * kk + tap];
                        }
                    }
                }
            }
            Op::PinvInit {
                x,
                row,
                col,
                row_sum,
                col_sum,
            } => {
                let t = self.value(*x);
                let (n, q) = (t.rows(), t.cols());
                let denom = *row_sum * *col_sum;
                if let Some(gx) = self.slot(g, *x) {
                    // gy is q×n (shape of the transpose)
                    let mut d_denom = T::zero();
                    for i in 0..n {
                        for j in 0..q {
                            let gz = gy[j * n + i];
                            gx[i * q + j] += gz / denom;
                            d_denom -= gz * t.get(i, j) / (denom * denom);
                        }
                    }
                    let d_row = d_denom * *col_sum;
                    let d_col = d_denom * *row_sum;
                    for j in 0..q {
                        gx[row * q + j] += d_row * signum(t.get(*row, j));
                    }
                    for i in 0..n {
                        gx[i * q + col] += d_col * signum(t.get(i, *col));
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, g: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].shape.len();
        Some(g[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn each(&self, g: &mut [Option<Vec<T>>], v: Var, mut f: impl FnMut(usize, &mut T)) {
        if let Some(s) = self.slot(g, v) {
            for (k, x) in s.iter_mut().enumerate() {
                f(k, x);
            }
        }
    }
}

impl Shape {
    fn transpose(self) -> Shape {
        Shape::new(self.cols, self.rows)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn signum<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn softmax_strided<T: Real>(d: &mut [T], start: usize, stride: usize, count: usize) {
    let idx = (0..count).map(|k| start + k * stride);
    let max = idx.clone().fold(T::neg_infinity(), |m, i| m.max(d[i]));
    let mut total = T::zero();
    for i in idx.clone() {
        d[i] = (d[i] - max).exp();
        total += d[i];
    }
    for i in idx {
        d[i] /= total;
    }
}

/// Every in-bounds `(i, j, di, dj, src)` tap of a same-padded convolution
/// on a `side×side` grid.
fn conv_taps(side: usize, kernel: usize, pad: usize) -> impl Iterator<Item = (usize, usize, usize, usize, usize)> {
    (0..side).flat_map(move |i| {
        (0..side).flat_map(move |j| {
            (0..kernel).flat_map(move |di| {
                (0..kernel).filter_map(move |dj| {
                    let si = (i + di).checked_sub(pad).filter(|&s| s < side)?;
                    let sj = (j + dj).checked_sub(pad).filter(|&s| s < side)?;
                    Some((i, j, di, dj, si * side + sj))
                })
            })
        })
    })
}
