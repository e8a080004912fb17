//! Small dense linear algebra used by the encoder and the trainer.
//!
//! Everything here is single-threaded with a fixed accumulation order, so a
//! given input always produces bit-identical output. The encoder's causality
//! guarantee depends on this: appending rows to a matrix must never change the
//! values computed for the rows that were already there.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("masked_attention: query row {row} has no allowed key")]
    FullyMasked { row: usize },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense `f32` matrix.
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `src` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, src: &Matrix) {
        assert_eq!(self.rows, src.rows);
        assert!(start + src.cols <= self.cols);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + src.cols].copy_from_slice(src.row(r));
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) {
        assert_eq!(bias.len(), self.cols, "bias length");
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(bias) {
                *x += *b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Column-wise sum, i.e. the gradient of a broadcast row bias.
    pub fn sum_rows(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
        out
    }

    /// Index of the largest entry in each row. Ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Boolean visibility grid: `allowed(q, k)` says whether query row `q` may
/// attend to key row `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n_query: usize,
    n_key: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(n_query: usize, n_key: usize) -> Self {
        Self {
            n_query,
            n_key,
            allowed: vec![true; n_query * n_key],
        }
    }

    pub fn none_allowed(n_query: usize, n_key: usize) -> Self {
        Self {
            n_query,
            n_key,
            allowed: vec![false; n_query * n_key],
        }
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n_key + k]
    }

    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.allowed[q * self.n_key + k] = v;
    }

    /// Allows keys `keys` for query `q`.
    pub fn allow_range(&mut self, q: usize, keys: std::ops::Range<usize>) {
        for k in keys {
            self.set(q, k, true);
        }
    }

    /// Renders rows as `1`/`.` characters, one query per line.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.n_query * (self.n_key + 1));
        for q in 0..self.n_query {
            for k in 0..self.n_key {
                s.push(if self.allowed(q, k) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// `a × b` with a fixed inner-loop order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k_dim, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * m..(i + 1) * m];
        for (k, &a_ik) in a_row.iter().enumerate().take(k_dim) {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * m..(k + 1) * m];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// Affine map `x × w + bias`.
pub fn linear(x: &Matrix, w: &Matrix, bias: &[f32]) -> Result<Matrix> {
    let mut out = matmul(x, w)?;
    if bias.len() != out.cols {
        return Err(LinalgError::ShapeMismatch {
            op: "linear bias",
            left: out.shape(),
            right: (1, bias.len()),
        });
    }
    out.add_row_vector(bias);
    Ok(out)
}

/// Scaled dot-product attention restricted to the keys the mask allows.
///
/// Disallowed keys are skipped entirely rather than given a large negative
/// logit, so their contents cannot influence the output in any bit.
pub fn masked_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttnMask,
    scale: f32,
) -> Result<Matrix> {
    attention_with_probs(q, k, v, mask, scale).map(|(out, _)| out)
}

/// Same as [`masked_attention`] but also returns the dense probability matrix
/// (zeros at masked positions), which the trainer needs for backprop.
pub fn attention_with_probs(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &AttnMask,
    scale: f32,
) -> Result<(Matrix, Matrix)> {
    if q.cols != k.cols {
        return Err(LinalgError::ShapeMismatch {
            op: "masked_attention q/k",
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows != v.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "masked_attention k/v",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if mask.n_query != q.rows || mask.n_key != k.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "masked_attention mask",
            left: (mask.n_query, mask.n_key),
            right: (q.rows, k.rows),
        });
    }

    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut probs = Matrix::zeros(q.rows, k.rows);
    let mut scores = vec![0.0f32; k.rows];
    for qi in 0..q.rows {
        let q_row = q.row(qi);
        let mut max = f32::NEG_INFINITY;
        let mut any = false;
        for kj in 0..k.rows {
            if !mask.allowed(qi, kj) {
                continue;
            }
            any = true;
            let mut dot = 0.0f32;
            for (a, b) in q_row.iter().zip(k.row(kj)) {
                dot += a * b;
            }
            let s = dot * scale;
            scores[kj] = s;
            if s > max {
                max = s;
            }
        }
        if !any {
            return Err(LinalgError::FullyMasked { row: qi });
        }
        let mut denom = 0.0f32;
        for kj in 0..k.rows {
            if mask.allowed(qi, kj) {
                let e = (scores[kj] - max).exp();
                scores[kj] = e;
                denom += e;
            }
        }
        let out_row = &mut out.data[qi * v.cols..(qi + 1) * v.cols];
        for kj in 0..k.rows {
            if !mask.allowed(qi, kj) {
                continue;
            }
            let p = scores[kj] / denom;
            probs.data[qi * k.rows + kj] = p;
            for (o, x) in out_row.iter_mut().zip(v.row(kj)) {
                *o += p * x;
            }
        }
    }
    Ok((out, probs))
}

/// Per-row normalization followed by the affine `gamma`, `beta`.
pub fn layer_norm(x: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(LinalgError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape(),
            right: (gamma.len(), beta.len()),
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    let n = x.cols as f32;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    Ok(out)
}

/// Row-wise log-softmax, stabilized by subtracting the row maximum.
pub fn log_softmax(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let m = b[0].len();
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        assert_eq!(matmul(&x, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![5.0], vec![6.0]];
        let want = naive_matmul(&a, &b);
        assert_eq!(want, vec![vec![17.0], vec![39.0]]);
        let got = matmul(
            &Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            &Matrix::from_rows(&[vec![5.0], vec![6.0]]),
        )
        .unwrap();
        assert_eq!(got.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            LinalgError::ShapeMismatch {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Matrix::from_rows(&[vec![0.3, -1.0]]);
        let k = Matrix::from_rows(&[vec![2.0, 5.0]]);
        let v = Matrix::from_rows(&[vec![7.0, -3.0, 1.5]]);
        let out = masked_attention(&q, &k, &v, &AttnMask::all_allowed(1, 1), 0.7).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let k = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let v = Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, -1.0]]);
        let out = masked_attention(&q, &k, &v, &AttnMask::all_allowed(1, 2), 1.0).unwrap();
        assert!((out.get(0, 0) - 3.0).abs() < 1e-6);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn attention_masked_key_has_no_influence() {
        let q = Matrix::from_rows(&[vec![1.0, -0.5]]);
        let v_allowed = vec![0.25, 4.0];
        let mut mask = AttnMask::none_allowed(1, 2);
        mask.set(0, 1, true);
        // Oracle: the unmasked computation with the masked logit at -inf
        // leaves a softmax of exactly [0, 1].
        for junk in [-1e6f32, 0.0, 3.0, 1e6] {
            let k = Matrix::from_rows(&[vec![junk, junk], vec![0.1, 0.2]]);
            let v = Matrix::from_rows(&[vec![junk, -junk], v_allowed.clone()]);
            let out = masked_attention(&q, &k, &v, &mask, 0.5).unwrap();
            assert_eq!(out.data(), &v_allowed[..]);
        }
    }

    #[test]
    fn attention_fully_masked_row_is_error() {
        let q = Matrix::zeros(2, 2);
        let k = Matrix::zeros(2, 2);
        let mut mask = AttnMask::all_allowed(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        let err = masked_attention(&q, &k, &k, &mask, 1.0).unwrap_err();
        assert_eq!(err, LinalgError::FullyMasked { row: 1 });
    }

    #[test]
    fn layer_norm_cases() {
        let ones = [1.0f32; 3];
        let zeros = [0.0f32; 3];
        let c = layer_norm(&Matrix::from_rows(&[vec![5.0; 3]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);

        let x = layer_norm(&Matrix::from_rows(&[vec![1.0, -1.0]]), &[1.0; 2], &[0.0; 2], 1e-12)
            .unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-6 && (x.get(0, 1) + 1.0).abs() < 1e-6);

        // Scalar oracle for [2, 4, 6]: mean 4, population variance 8/3.
        let eps = 1e-5f64;
        let inv = 1.0 / (8.0f64 / 3.0 + eps).sqrt();
        let want = [-2.0 * inv, 0.0, 2.0 * inv];
        let got = layer_norm(&Matrix::from_rows(&[vec![2.0, 4.0, 6.0]]), &ones, &zeros, eps as f32)
            .unwrap();
        for (g, w) in got.data().iter().zip(want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }

        let affine = layer_norm(
            &Matrix::from_rows(&[vec![2.0, 4.0, 6.0]]),
            &[2.0, 2.0, 2.0],
            &[1.0, 1.0, 1.0],
            eps as f32,
        )
        .unwrap();
        assert!((affine.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(layer_norm(&Matrix::zeros(1, 3), &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn log_softmax_cases() {
        let u = log_softmax(&Matrix::from_rows(&[vec![0.7; 4]]));
        for v in u.data() {
            assert!((v + 4.0f32.ln()).abs() < 1e-6);
        }
        let big = log_softmax(&Matrix::from_rows(&[vec![1000.0, 0.0]]));
        assert!(big.is_finite());
        assert!(big.get(0, 0).abs() < 1e-6);
        assert!((big.get(0, 1) + 1000.0).abs() < 1e-3);

        let xs = [1.0f64, 2.0, 3.0];
        let lse = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        let got = log_softmax(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        for (g, x) in got.data().iter().zip(xs) {
            assert!((*g as f64 - (x - lse)).abs() < 1e-6);
        }
    }

    fn mat_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f32..2.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in mat_strategy(3, 4),
            b in mat_strategy(4, 5),
            c in mat_strategy(5, 2),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let scale = l.abs().max(r.abs()).max(1.0);
                prop_assert!((l - r).abs() / scale <= 1e-4);
            }
        }

        #[test]
        fn log_softmax_rows_normalize(x in mat_strategy(4, 7)) {
            let y = log_softmax(&x);
            for r in 0..y.rows() {
                let s: f64 = y.row(r).iter().map(|v| (*v as f64).exp()).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn masked_content_is_irrelevant(
            q in mat_strategy(3, 4),
            k in mat_strategy(5, 4),
            v in mat_strategy(5, 3),
            junk_k in mat_strategy(5, 4),
            junk_v in mat_strategy(5, 3),
            bits in proptest::collection::vec(any::<bool>(), 15),
        ) {
            let mut mask = AttnMask::none_allowed(3, 5);
            for qi in 0..3 {
                mask.set(qi, qi, true);
                for kj in 0..5 {
                    if bits[qi * 5 + kj] {
                        mask.set(qi, kj, true);
                    }
                }
            }
            // Per query: overwrite every key/value it cannot see.
            let base = masked_attention(&q, &k, &v, &mask, 0.5).unwrap();
            for qi in 0..3 {
                let mut k2 = k.clone();
                let mut v2 = v.clone();
                for kj in 0..5 {
                    if !mask.allowed(qi, kj) {
                        k2.row_mut(kj).copy_from_slice(junk_k.row(kj));
                        v2.row_mut(kj).copy_from_slice(junk_v.row(kj));
                    }
                }
                let other = masked_attention(&q, &k2, &v2, &mask, 0.5).unwrap();
                prop_assert_eq!(base.row(qi), other.row(qi));
            }
        }
    }
}
