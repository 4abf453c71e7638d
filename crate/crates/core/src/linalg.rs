//! Dense numeric kernels shared by every other module.
//!
//! Everything here is `f64` and allocation-light. No BLAS: the matrices
//! involved in trace replay are a few hundred rows at most, and exact
//! reproducibility of the accumulation order matters more than speed.

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero by [`cosine_similarity`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("matrix contains a non-finite entry"));
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

    /// Builds a matrix from equally sized rows. An empty slice yields a
    /// `0 x cols` matrix only through [`Matrix::zeros`]; here it is an error.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::contract("from_rows needs at least one row"))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::contract("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::contract(format!(
                "row of length {} pushed onto matrix with {} cols",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Removes row `r`, shifting later rows up, and returns it.
    pub fn remove_row(&mut self, r: usize) -> Vec<f64> {
        assert!(r < self.rows, "row {r} out of range for {} rows", self.rows);
        let removed: Vec<f64> = self
            .data
            .drain(r * self.cols..(r + 1) * self.cols)
            .collect();
        self.rows -= 1;
        removed
    }

    /// Copies the listed rows, in the listed order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// First `n` rows.
    pub fn head_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("matmul overflowed to a non-finite value"));
    }
    Ok(out)
}

/// `q K^T / sqrt(d)` for a block of queries against a block of keys.
pub fn scaled_scores(queries: &Matrix, keys: &Matrix) -> Result<Matrix> {
    if queries.cols != keys.cols {
        return Err(Error::contract(format!(
            "query dim {} != key dim {}",
            queries.cols, keys.cols
        )));
    }
    let scale = 1.0 / (queries.cols as f64).sqrt();
    let mut out = Matrix::zeros(queries.rows, keys.rows);
    for i in 0..queries.rows {
        let q = queries.row(i);
        for j in 0..keys.rows {
            out.data[i * keys.rows + j] = dot(q, keys.row(j)) * scale;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
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

/// Row softmax with a causal mask.
///
/// A square `L x L` input is treated as prompt-mode attention: entries with
/// `j > i` become exactly zero. A single row is a generation-mode query and
/// is left unmasked.
pub fn causal_softmax(scores: &Matrix) -> Result<Matrix> {
    if scores.is_empty() {
        return Err(Error::contract("causal_softmax on an empty matrix"));
    }
    let square = scores.rows == scores.cols;
    if !square && scores.rows != 1 {
        return Err(Error::contract(format!(
            "causal_softmax expects LxL or 1xL scores, got {}x{}",
            scores.rows, scores.cols
        )));
    }
    let mut out = scores.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let visible = if square { i + 1 } else { row.len() };
        softmax_in_place(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Cosine similarity clamped to `[-1, 1]`. Returns 0 when either vector
/// has norm below [`NORM_EPSILON`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity on unequal lengths");
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_EPSILON || nb < NORM_EPSILON {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-column sums of a matrix.
pub fn column_sums(a: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; a.cols];
    for row in a.row_iter() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

/// Population variance of a sequence. Empty input yields 0.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Population variance of the column sums of `a`.
pub fn column_sum_variance(a: &Matrix) -> Result<f64> {
    if a.cols == 0 {
        return Err(Error::contract(
            "column_sum_variance needs at least one column",
        ));
    }
    Ok(population_variance(&column_sums(a)))
}
