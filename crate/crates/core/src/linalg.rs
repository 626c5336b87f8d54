//! Dense row-major matrices and the handful of kernels the rest of the crate
//! is built on.
//!
//! Every kernel sums sequentially over the inner dimension, so results are
//! bit-reproducible for identical inputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::Shape(format!(
                "vstack of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// `self += s * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, 1.0)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in self.iter_rows() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

/// `a · b`, summing over the inner dimension in index order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul of {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0;
            for (k, &av) in arow.iter().enumerate() {
                acc += av * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn of ({}x{})ᵀ and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.rows {
                acc += a.data[k * a.cols + i] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt of {}x{} and ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Pairwise cosine similarities between the rows of `x`.
///
/// The result is symmetric by construction with an exact unit diagonal and
/// entries clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix(x: &Matrix) -> Result<Matrix> {
    let norms: Vec<f64> = x
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| !(n > 1e-12)) {
        return Err(Error::Degenerate(format!(
            "row {i} has norm {} (cosine similarity undefined)",
            norms[i]
        )));
    }
    let n = x.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = 1.0;
        let ri = x.row(i);
        for j in (i + 1)..n {
            let rj = x.row(j);
            let mut dot = 0.0;
            for k in 0..x.cols {
                dot += ri[k] * rj[k];
            }
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    Ok(out)
}

/// Keeps the `k` largest entries of every row and zeroes the rest.
///
/// Ties go to the lowest column index. The caller is expected to have zeroed
/// the diagonal already.
pub fn topk_sparsify_rows(w: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k >= w.cols {
        return Err(Error::Param(format!(
            "top-k needs 1 <= k < {} columns, got k = {k}",
            w.cols
        )));
    }
    let mut out = Matrix::zeros(w.rows, w.cols);
    let mut order: Vec<usize> = Vec::with_capacity(w.cols);
    for i in 0..w.rows {
        let row = w.row(i);
        order.clear();
        order.extend(0..w.cols);
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let dst = out.row_mut(i);
        for &j in &order[..k] {
            dst[j] = row[j];
        }
    }
    Ok(out)
}

/// `D^(-1/2) W D^(-1/2)` with `D` the row-sum degree matrix.
///
/// Zero-degree rows stay zero.
pub fn symmetric_normalize(w: &Matrix) -> Result<Matrix> {
    if w.rows != w.cols {
        return Err(Error::Shape(format!(
            "symmetric normalization needs a square matrix, got {}x{}",
            w.rows, w.cols
        )));
    }
    if let Some(v) = w.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Param(format!(
            "symmetric normalization needs nonnegative entries, found {v}"
        )));
    }
    let inv_sqrt: Vec<f64> = w
        .iter_rows()
        .map(|r| {
            let d: f64 = r.iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = w.clone();
    for i in 0..w.rows {
        for j in 0..w.cols {
            out[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(out)
}

/// Pivot magnitudes below this are treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Solves `a · X = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!(
            "solve_linear needs a square system, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.rows != n {
        return Err(Error::Shape(format!(
            "right-hand side has {} rows, system has {n}",
            b.rows
        )));
    }
    let m = b.cols;
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut piv = col;
        let mut best = lu[(col, col)].abs();
        for r in (col + 1)..n {
            let v = lu[(r, col)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if !(best >= SINGULAR_PIVOT) {
            return Err(Error::Singular {
                column: col,
                pivot: best,
            });
        }
        if piv != col {
            swap_rows(&mut lu, piv, col);
            swap_rows(&mut x, piv, col);
        }
        let p = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / p;
            if f == 0.0 {
                continue;
            }
            lu[(r, col)] = 0.0;
            for c in (col + 1)..n {
                let v = lu[(col, c)];
                lu[(r, c)] -= f * v;
            }
            for c in 0..m {
                let v = x[(col, c)];
                x[(r, c)] -= f * v;
            }
        }
    }

    for col in (0..n).rev() {
        let p = lu[(col, col)];
        for c in 0..m {
            let mut acc = x[(col, c)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, c)];
            }
            x[(col, c)] = acc / p;
        }
    }
    Ok(x)
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    if a == b {
        return;
    }
    let cols = m.cols;
    let (lo, hi) = (a.min(b), a.max(b));
    let (head, tail) = m.data.split_at_mut(hi * cols);
    head[lo * cols..(lo + 1) * cols].swap_with_slice(&mut tail[..cols]);
}
