//! Dense row-major tensors and the handful of kernels the attention code needs.
//!
//! Every dot product accumulates in ascending index order so that two code
//! paths computing the same products over the same operands agree bitwise.

use std::fmt;
use std::ops::Range;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::meter::{self, Ticket};

/// Floating point element type of a [`Tensor`].
pub trait Element: Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static {
    const BYTES: usize;
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with an explicit shape over a flat row-major buffer.
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    ticket: Option<Ticket>,
}

impl<T: Element> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let ticket = meter::register(data.len() * T::BYTES);
        Tensor { shape, data, ticket }
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::from_parts(vec![rows.len(), cols], data)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(mut self) -> Vec<T> {
        std::mem::take(&mut self.data)
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * T::BYTES
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::from_f64(v.as_f64())).collect())
    }

    /// Reinterprets the buffer with a new shape. No data moves.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Zero padding; `spec[d] = (before, after)` for each dimension.
    pub fn pad(&self, spec: &[(usize, usize)]) -> Result<Self> {
        if spec.len() != self.rank() {
            return Err(Error::shape("pad", &self.shape, &[spec.len()]));
        }
        let out_shape: Vec<usize> = self.shape.iter().zip(spec).map(|(&n, &(b, a))| n + b + a).collect();
        let mut out = Self::zeros(&out_shape);
        if self.data.is_empty() {
            return Ok(out);
        }
        let offsets: Vec<usize> = spec.iter().map(|&(b, _)| b).collect();
        copy_block(&self.data, &self.shape, &mut out.data, &out_shape, &offsets);
        Ok(out)
    }

    /// Copies the selected region; one range per dimension.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Self> {
        if ranges.len() != self.rank() {
            return Err(Error::shape("slice", &self.shape, &[ranges.len()]));
        }
        for (r, &n) in ranges.iter().zip(&self.shape) {
            if r.start > r.end || r.end > n {
                return Err(Error::Bounds { op: "slice", start: r.start, end: r.end, extent: n });
            }
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let strides = strides(&self.shape);
            let last = self.rank() - 1;
            let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
            loop {
                let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                data.extend_from_slice(&self.data[base..base + out_shape[last]]);
                // advance all but the innermost dimension
                let mut d = last;
                loop {
                    if d == 0 {
                        return Ok(Self::from_parts(out_shape, data));
                    }
                    d -= 1;
                    idx[d] += 1;
                    if idx[d] < ranges[d].end {
                        break;
                    }
                    idx[d] = ranges[d].start;
                }
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Sum of squares, accumulated in f64.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }

    /// Exact equality of shape and every bit of every element.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Copies `src` into this matrix starting at column `col` (rows must agree).
    pub fn write_columns(&mut self, col: usize, src: &Self) -> Result<()> {
        if src.rows() != self.rows() || col + src.cols() > self.cols() {
            return Err(Error::shape("write_columns", &self.shape, &src.shape));
        }
        let w = src.cols();
        for i in 0..src.rows() {
            self.row_mut(i)[col..col + w].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Columns `range` of a matrix as a new matrix.
    pub fn columns(&self, range: Range<usize>) -> Result<Self> {
        let rows = self.rows();
        self.slice(&[0..rows, range])
    }

    /// Rows `range` of a matrix as a new matrix.
    pub fn row_block(&self, range: Range<usize>) -> Result<Self> {
        let cols = self.cols();
        self.slice(&[range, 0..cols])
    }
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl<T: Element> Drop for Tensor<T> {
    fn drop(&mut self) {
        if let Some(ticket) = self.ticket.take() {
            meter::release(ticket);
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("dtype", &T::NAME).field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Writes `src` (shape `src_shape`) into `dst` (shape `dst_shape`) at `offsets`.
fn copy_block<T: Copy>(src: &[T], src_shape: &[usize], dst: &mut [T], dst_shape: &[usize], offsets: &[usize]) {
    let rank = src_shape.len();
    let dst_strides = strides(dst_shape);
    let inner = src_shape[rank - 1];
    let outer: usize = src_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut base = offsets[rank - 1];
        for d in 0..rank - 1 {
            base += (idx[d] + offsets[d]) * dst_strides[d];
        }
        dst[base..base + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn check_matrix<T: Element>(op: &'static str, t: &Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if t.rank() != 2 || other.rank() != 2 {
        return Err(Error::shape(op, t.shape(), other.shape()));
    }
    Ok(())
}

/// `a · b` for `a: M×K`, `b: K×N`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul", a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for (i, out_row) in out.data.chunks_mut(n.max(1)).enumerate().take(m) {
        let a_row = &ad[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: M×K`, `b: N×K`.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul_nt", a, b)?;
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            out.data[i * n + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a: K×M`, `b: K×N`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_matrix("matmul_tn", a, b)?;
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &api) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + api * bv;
            }
        }
    }
    Ok(out)
}

/// Ascending-order dot product.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Boolean matrix; `true` marks an attendable entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Mask { rows, cols, allowed }
    }

    /// Lower-triangular mask: query `i` sees keys `j <= i`.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |i, j| j <= i)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Row-wise softmax with optional masking.
///
/// Masked entries get probability exactly zero. A row with no attendable
/// entry comes back as all zeros and a warning is logged.
pub fn softmax_rows<T: Element>(m: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    if m.rank() != 2 {
        return Err(Error::shape("softmax_rows", m.shape(), &[]));
    }
    if let Some(mask) = mask {
        if mask.shape() != [m.rows(), m.cols()] {
            return Err(Error::shape("softmax_rows", m.shape(), &mask.shape()));
        }
    }
    let cols = m.cols();
    let mut out = Tensor::zeros(m.shape());
    for i in 0..m.rows() {
        let row = m.row(i);
        let allowed = |j: usize| mask.is_none_or(|mk| mk.allows(i, j));
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            log::warn!("softmax_rows: row {i} has no attendable entries; returning zeros");
            continue;
        }
        let out_row = &mut out.data[i * cols..(i + 1) * cols];
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out_row[j] = e;
                sum = sum + e;
            }
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Backward of [`softmax_rows`]: `dx = p ⊙ (dp - Σ p·dp)` per row.
pub fn softmax_rows_backward<T: Element>(probs: &Tensor<T>, d_probs: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != d_probs.shape() {
        return Err(Error::shape("softmax_rows_backward", probs.shape(), d_probs.shape()));
    }
    let mut out = Tensor::zeros(probs.shape());
    let cols = probs.cols();
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let dp = d_probs.row(i);
        let inner = dot(p, dp);
        let o = &mut out.data[i * cols..(i + 1) * cols];
        for j in 0..cols {
            o[j] = p[j] * (dp[j] - inner);
        }
    }
    Ok(out)
}
