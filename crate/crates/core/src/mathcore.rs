//! Dense f32 kernels shared by the model, decoder and metrics.
//!
//! Everything here is single-threaded with a fixed evaluation order, so the
//! same inputs always produce the same bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RoPE frequency base.
pub const ROPE_BASE: f32 = 10_000.0;

const RMS_EPS: f32 = 1e-6;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn bitwise_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `a · b`. Returns the product and the number of scalar multiply-adds.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<(Matrix, u64)> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let macs = matmul_into(a, b, &mut out);
    Ok((out, macs))
}

/// Shape-unchecked core of [`matmul`]; `out` must be `a.rows × b.cols`.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) -> u64 {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    out.data.fill(0.0);
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    (a.rows * a.cols * b.cols) as u64
}

/// A categorical distribution over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f32>);

impl ProbabilityVector {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ShapeMismatch("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidConfig(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let sum = kahan_sum(probs.iter().copied());
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f32; len])
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        Self(p)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable entry and its probability; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, f32) {
        argmax(&self.0)
    }
}

/// Index and value of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> (usize, f32) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Max-subtracted softmax of one row of logits.
pub fn softmax_row(logits: &[f32]) -> Result<ProbabilityVector> {
    if logits.is_empty() {
        return Err(Error::ShapeMismatch("softmax of an empty row".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    Ok(ProbabilityVector(probs))
}

/// In-place stable softmax over finite values.
pub(crate) fn softmax_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
///
/// Terms are summed in ascending order of probability (compensated), so the
/// result is independent of the order of entries.
pub fn entropy(p: &ProbabilityVector) -> f32 {
    let mut sorted = p.0.clone();
    sorted.sort_by(f32::total_cmp);
    let h = kahan_sum(sorted.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()));
    h.clamp(0.0, (p.len() as f32).ln())
}

/// Scalar operations charged to one [`entropy`] call: one term per entry.
#[inline]
pub fn entropy_ops(vocab: usize) -> u64 {
    vocab as u64
}

fn kahan_sum(values: impl Iterator<Item = f32>) -> f32 {
    let mut sum = 0.0f32;
    let mut comp = 0.0f32;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 − a·b / (‖a‖‖b‖)`, clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine distance between lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::ZeroNormVector);
    }
    let cos = dot(a, b) / (na * nb);
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// RMS-normalizes `x` in place and scales by `gain`.
pub fn rms_norm(x: &mut [f32], gain: &[f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (mean_sq + RMS_EPS).sqrt();
    for (v, g) in x.iter_mut().zip(gain) {
        *v *= scale * g;
    }
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotates each row of `qk` by its absolute position, treating the whole row
/// as one rotary block of width `cols`.
pub fn rotary_rotate(qk: &Matrix, positions: &[usize]) -> Result<Matrix> {
    if qk.cols % 2 != 0 {
        return Err(Error::OddRotaryDim(qk.cols));
    }
    if positions.len() != qk.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            qk.rows
        )));
    }
    let mut out = qk.clone();
    let freqs = rope_frequencies(qk.cols);
    for (r, &pos) in positions.iter().enumerate() {
        rotate_block(out.row_mut(r), pos, &freqs);
    }
    Ok(out)
}

/// `base^(−2m/dim)` for `m in 0..dim/2`.
pub fn rope_frequencies(dim: usize) -> Vec<f32> {
    (0..dim / 2)
        .map(|m| ROPE_BASE.powf(-2.0 * m as f32 / dim as f32))
        .collect()
}

/// Applies the rotation to consecutive `(2m, 2m+1)` pairs of one block.
pub(crate) fn rotate_block(block: &mut [f32], pos: usize, freqs: &[f32]) {
    for (m, &f) in freqs.iter().enumerate() {
        let (sin, cos) = (pos as f32 * f).sin_cos();
        let x = block[2 * m];
        let y = block[2 * m + 1];
        block[2 * m] = x * cos - y * sin;
        block[2 * m + 1] = x * sin + y * cos;
    }
}
