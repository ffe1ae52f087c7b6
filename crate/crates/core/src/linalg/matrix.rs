use std::fmt;
use std::ops::Range;

use crate::error::{Result, ShareError};
use crate::parallel;

/// Output sizes (rows × inner × cols) above which products fan out over rows.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Row-major dense matrix of `f64`.
///
/// Entries are finite when built through [`DenseMatrix::new`]; the arithmetic
/// helpers assume well-shaped operands and panic on mismatched dimensions,
/// while `try_*` variants report [`ShareError::Shape`].
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            let row = self.row(r);
            for (c, v) in row.iter().take(6).enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:.4}")?;
            }
            if self.cols > 6 {
                write!(f, ", ...")?;
            }
        }
        if self.rows > 6 {
            write!(f, "; ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Build from row-major data, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ShareError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(ShareError::NonFinite { row: idx / cols.max(1), col: idx % cols.max(1) });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(ShareError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(ShareError::Shape("ragged columns".into()));
        }
        let cols = columns.len();
        Self::new(rows, cols, (0..rows * cols).map(|i| columns[i % cols][i / cols]).collect())
    }

    /// Single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec_unchecked(1, v.len(), v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn dot(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "dot: {}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols);
        let (m, inner, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        let kernel = |i: usize, row: &mut [f64]| {
            let a = &self.data[i * inner..(i + 1) * inner];
            for (l, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = &other.data[l * n..(l + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        };
        if m * inner * n >= PAR_FLOP_THRESHOLD {
            parallel::for_each_row(&mut out, n, kernel);
        } else {
            for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
                kernel(i, row);
            }
        }
        Self::from_vec_unchecked(m, n, out)
    }

    pub fn try_dot(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(ShareError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.dot(other))
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_dot(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_dot: ({}x{})ᵀ · {}x{}", self.rows, self.cols, other.rows, other.cols);
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for l in 0..self.rows {
            let a = self.row(l);
            let b = other.row(l);
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += av * bv;
                }
            }
        }
        Self::from_vec_unchecked(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn dot_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "dot_t: {}x{} · ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols);
        let (m, n, inner) = (self.rows, other.rows, self.cols);
        let mut out = vec![0.0; m * n];
        let kernel = |i: usize, row: &mut [f64]| {
            let a = self.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        };
        if m * inner * n >= PAR_FLOP_THRESHOLD {
            parallel::for_each_row(&mut out, n, kernel);
        } else {
            for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
                kernel(i, row);
            }
        }
        Self::from_vec_unchecked(m, n, out)
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mat_vec: {}x{} · {}", self.rows, self.cols, x.len());
        (0..self.rows).map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `selfᵀ · x`.
    pub fn t_mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "t_mat_vec: ({}x{})ᵀ · {}", self.rows, self.cols, x.len());
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        self.zip_map(other, |a, b| a - b)
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "inner: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn column_range(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.cols, "column range out of bounds");
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Self::from_vec_unchecked(self.rows, width, data)
    }

    pub fn row_range(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.rows, "row range out of bounds");
        Self::from_vec_unchecked(
            range.len(),
            self.cols,
            self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        )
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(idx.len(), self.cols, data)
    }

    /// Stack matrices vertically; all must share the column count.
    pub fn vstack(blocks: &[&Self]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(ShareError::Shape("vstack: column counts differ".into()));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Stack matrices horizontally; all must share the row count.
    pub fn hstack(blocks: &[&Self]) -> Result<Self> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(ShareError::Shape("hstack: row counts differ".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Self::from_vec_unchecked(rows, cols, data))
    }

    /// Column-wise mean over rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, &v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    /// Subtract `v` from every row.
    pub fn sub_row_vector(&self, v: &[f64]) -> Self {
        assert_eq!(self.cols, v.len(), "sub_row_vector: length mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &m) in out.data[i * self.cols..(i + 1) * self.cols].iter_mut().zip(v) {
                *o -= m;
            }
        }
        out
    }

    /// Subtract `v` from every column.
    pub fn sub_col_vector(&self, v: &[f64]) -> Self {
        assert_eq!(self.rows, v.len(), "sub_col_vector: length mismatch");
        let mut out = self.clone();
        for (i, &m) in v.iter().enumerate() {
            for o in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *o -= m;
            }
        }
        out
    }

    /// Largest absolute deviation of `selfᵀ·self` from the identity.
    pub fn orthonormality_residual(&self) -> f64 {
        let g = self.t_dot(self);
        let mut worst: f64 = 0.0;
        for i in 0..g.rows {
            for j in 0..g.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }
}
