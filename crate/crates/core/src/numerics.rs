//! Dense row-major matrices and the handful of kernels the rest of the crate
//! is built from. Storage and accumulation are `f64`; single precision only
//! appears at the tensor-file boundary.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A query, key or value sequence: one token per row.
pub type SeqTensor = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(
                "Matrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::mismatch(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero; a zero-width matrix still has rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Copy of rows `range` as a new matrix.
    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        assert!(range.end <= self.rows, "row range out of bounds");
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self::from_vec_unchecked(range.len(), self.cols, data)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| x * s).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::mismatch("vstack", format!("{cols} columns"), p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity clamped to [-1, 1]; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::mismatch(
            "matmul",
            format!("inner dimension {}", a.cols),
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let s = a.data[i * k + t];
            if s == 0.0 {
                continue;
            }
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, bv) in acc.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Ok(Matrix::from_vec_unchecked(m, n, out))
}

/// `A · Bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::mismatch(
            "matmul_transposed",
            format!("shared width {}", a.cols),
            b.cols,
        ));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        out.extend(b.row_iter().map(|br| dot(ar, br)));
    }
    Ok(Matrix::from_vec_unchecked(a.rows, b.rows, out))
}

/// In-place stable softmax of one row. Returns `(max, sum)` of the shifted
/// exponentials so callers can recover the log-normaliser `max + ln(sum)`.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return (max, 0.0);
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    (max, sum)
}

pub fn row_softmax(a: &Matrix) -> Result<Matrix> {
    if a.is_empty() {
        return Err(Error::Empty("row_softmax"));
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Kernel-2, stride-2 mean pooling along rows. An odd trailing row passes
/// through unchanged.
pub fn mean_pool_rows(x: &Matrix) -> Matrix {
    let out_rows = x.rows.div_ceil(2);
    let mut data = Vec::with_capacity(out_rows * x.cols);
    for t in 0..out_rows {
        let a = x.row(2 * t);
        if 2 * t + 1 < x.rows {
            let b = x.row(2 * t + 1);
            data.extend(a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)));
        } else {
            data.extend_from_slice(a);
        }
    }
    Matrix::from_vec_unchecked(out_rows, x.cols, data)
}

/// `‖O − O_ref‖_F / ‖O_ref‖_F`.
pub fn relative_error(out: &Matrix, reference: &Matrix) -> Result<f64> {
    if out.shape() != reference.shape() {
        return Err(Error::mismatch(
            "relative_error",
            format!("{:?}", reference.shape()),
            format!("{:?}", out.shape()),
        ));
    }
    let denom = reference.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::ZeroNormReference);
    }
    let num = out
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}
