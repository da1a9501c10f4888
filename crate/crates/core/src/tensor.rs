//! Minimal dense kernel: row-major `f64` matrices, scaled `Q Kᵀ`, causally
//! masked row softmax and argmax.
//!
//! Everything here is deliberately naive. Sizes in this crate are desk-scale
//! (a few hundred positions, head dims up to 128), so clarity and exact
//! reproducibility win over throughput.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite matrix entry at flat index {pos}")));
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

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has length {} but row 0 has {cols}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        if self.cols == 0 {
            return vec![Vec::new(); self.rows];
        }
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// Elementwise sum. Used to pool the query heads of a GQA group.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Causal admissibility: a query at absolute position `i` may attend to key
/// `j` iff `j <= i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CausalMask;

impl CausalMask {
    #[inline]
    pub fn allows(self, query_pos: usize, key_pos: usize) -> bool {
        key_pos <= query_pos
    }
}

/// `scale * q · kᵀ`, shape `q.rows × k.rows`.
pub fn matmul_scaled(q: &Matrix, k: &Matrix, scale: f64) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} != key dim {}",
            q.cols, k.cols
        )));
    }
    let mut out = Vec::with_capacity(q.rows * k.rows);
    for i in 0..q.rows {
        let qi = q.row(i);
        for j in 0..k.rows {
            let dot: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            out.push(scale * dot);
        }
    }
    Matrix::new(q.rows, k.rows, out)
}

/// Row softmax under a causal mask. Local row `i` is the query at absolute
/// position `row_offset + i`; masked entries come out as exactly `0.0`.
pub fn softmax_row_masked(scores: &Matrix, mask: CausalMask, row_offset: usize) -> Result<Matrix> {
    let mut out = vec![0.0; scores.rows * scores.cols];
    for i in 0..scores.rows {
        let abs = row_offset + i;
        let visible = scores.cols.min(abs + 1);
        if visible == 0 || !mask.allows(abs, 0) {
            return Err(invalid(format!("row {i} has every entry masked")));
        }
        let row = &scores.row(i)[..visible];
        let dst = &mut out[i * scores.cols..i * scores.cols + visible];
        softmax_into(row, dst);
    }
    Matrix::new(scores.rows, scores.cols, out)
}

/// Max-subtracted softmax of `logits` written into `dst`.
pub(crate) fn softmax_into(logits: &[f64], dst: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &l) in dst.iter_mut().zip(logits) {
        *d = (l - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> Result<usize> {
    let (first, rest) = row
        .split_first()
        .ok_or_else(|| invalid("argmax of an empty row"))?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best.0)
}
