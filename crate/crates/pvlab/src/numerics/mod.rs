//! Minimal dense numeric kernel shared by every other module.
//!
//! Storage is row-major `f32`; every reduction (dot products, means, softmax
//! denominators) accumulates in `f64`. All operations are pure functions on
//! immutable inputs and are safe to call from any number of threads.

mod pca;

pub use pca::{pca_topk, PcaProjection};

use thiserror::Error;

/// Errors from the numeric kernel.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error in {context}: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },
    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },
    #[error("softmax row {row} is entirely -inf (degenerate row)")]
    DegenerateRow { row: usize },
    #[error("cosine similarity undefined for zero vector")]
    UndefinedSimilarity,
    #[error("eigensolver did not converge after {iterations} sweeps")]
    Convergence { iterations: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape {
                context: "from_vec",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "from_vec" });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build without the finiteness check. Used on hot paths and for matrices
    /// that intentionally carry `-inf` mask sentinels.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::Shape {
                    context: "from_rows",
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Copy of the rows in `range` as a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        assert!(range.end <= self.rows);
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with 64-bit accumulation.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Matrix product with 64-bit accumulation per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape {
            context: "matmul",
            detail: format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(a.data(), b.data(), a.rows, a.cols, b.cols, out.data_mut());
    if !out.is_finite() {
        return Err(NumericsError::NonFinite { context: "matmul" });
    }
    Ok(out)
}

/// Fast inner kernel with f32 accumulation, used by the model's forward and
/// backward passes where throughput matters and the reduction depth is small.
pub(crate) fn matmul_into_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    // two-row blocking halves the traffic over B
    let mut i = 0;
    while i + 1 < m {
        let (arow0, arow1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
        let (head, tail) = out[i * n..(i + 2) * n].split_at_mut(n);
        for kk in 0..k {
            let (a0, a1) = (arow0[kk], arow1[kk]);
            if a0 == 0.0 && a1 == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                head[j] += a0 * brow[j];
                tail[j] += a1 * brow[j];
            }
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// Inner matmul kernel: `out = A (m x k) * B (k x n)`, f64 accumulators.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (av, bv) in acc.iter_mut().zip(brow.iter()) {
                *av += aik * *bv as f64;
            }
        }
        for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = *v as f32;
        }
    }
}

/// Row-wise softmax with per-row max subtraction and f64 denominators.
///
/// `-inf` entries are accepted as mask sentinels and map to probability 0;
/// NaN input is rejected eagerly, and a row that is entirely `-inf` is an
/// error rather than a NaN row.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        softmax_row(logits.row(i), out.row_mut(i)).map_err(|e| match e {
            NumericsError::DegenerateRow { .. } => NumericsError::DegenerateRow { row: i },
            other => other,
        })?;
    }
    Ok(out)
}

/// Softmax of a single row into `out`. Shared with the attention kernels.
pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &v in row {
        if v.is_nan() || v == f32::INFINITY {
            return Err(NumericsError::NonFinite { context: "softmax_rows" });
        }
        if v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(NumericsError::DegenerateRow { row: 0 });
    }
    let mut denom = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = if v == f32::NEG_INFINITY {
            0.0f64
        } else {
            ((v - max) as f64).exp()
        };
        *o = e as f32;
        denom += e;
    }
    let inv = 1.0 / denom;
    for o in out.iter_mut() {
        *o = (*o as f64 * inv) as f32;
    }
    Ok(())
}

/// Cosine similarity in `[-1, 1]`.
///
/// Bitwise-identical inputs return exactly `1.0`; a zero vector is an error so
/// callers never observe NaN.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NumericsError::Shape {
            context: "cosine",
            detail: format!("length {} vs {}", a.len(), b.len()),
        });
    }
    if a == b {
        if a.iter().all(|v| *v == 0.0) {
            return Err(NumericsError::UndefinedSimilarity);
        }
        return Ok(1.0);
    }
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(NumericsError::UndefinedSimilarity);
    }
    Ok((dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-D linear interpolation of the rows of a `T x d` matrix to `target_len`
/// rows.
///
/// With `align_ends` set the first and last output rows equal the first and
/// last input rows exactly and interior rows are convex combinations of the
/// two bracketing input rows under the affine index map
/// `i -> i * (T-1) / (target_len-1)`. Without it, half-sample offsets are used
/// (`i -> (i + 0.5) * T / target_len - 0.5`, clamped).
pub fn interp_linear(values: &Matrix, target_len: usize, align_ends: bool) -> Result<Matrix> {
    let t = values.rows;
    if t < 2 || target_len < 2 {
        return Err(NumericsError::Shape {
            context: "interp_linear",
            detail: format!("need >= 2 rows on both sides, got {t} -> {target_len}"),
        });
    }
    if align_ends && target_len == t {
        return Ok(values.clone());
    }
    let d = values.cols;
    let mut out = Matrix::zeros(target_len, d);
    for i in 0..target_len {
        if align_ends && i == 0 {
            out.row_mut(0).copy_from_slice(values.row(0));
            continue;
        }
        if align_ends && i == target_len - 1 {
            out.row_mut(i).copy_from_slice(values.row(t - 1));
            continue;
        }
        let src = if align_ends {
            i as f64 * (t - 1) as f64 / (target_len - 1) as f64
        } else {
            ((i as f64 + 0.5) * t as f64 / target_len as f64 - 0.5).clamp(0.0, (t - 1) as f64)
        };
        let lo = (src.floor() as usize).min(t - 2);
        let w = src - lo as f64;
        let a = values.row(lo);
        let b = values.row(lo + 1);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = ((1.0 - w) * a[j] as f64 + w * b[j] as f64) as f32;
        }
    }
    Ok(out)
}

/// Mean of each column with 64-bit accumulation.
pub fn column_means(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0f64; m.cols];
    for i in 0..m.rows {
        for (s, &v) in sums.iter_mut().zip(m.row(i)) {
            *s += v as f64;
        }
    }
    let inv = 1.0 / m.rows as f64;
    sums.iter_mut().for_each(|s| *s *= inv);
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::identity(2);
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_dot() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().get(0, 0), 11.0);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(2, 2);
        let b = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let got = matmul(&z, &b).unwrap();
        assert!(got.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let m = Matrix::from_vec(1, 3, vec![0.0; 3]).unwrap();
        let got = softmax_rows(&m).unwrap();
        for j in 0..3 {
            assert!((got.get(0, j) - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let m = Matrix::from_vec(1, 2, vec![(2.0f32).ln(), 0.0]).unwrap();
        let got = softmax_rows(&m).unwrap();
        assert!((got.get(0, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((got.get(0, 1) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_mask_sentinel() {
        let m = Matrix::from_vec_unchecked(1, 2, vec![0.0, f32::NEG_INFINITY]);
        let got = softmax_rows(&m).unwrap();
        assert_eq!(got.get(0, 0), 1.0);
        assert_eq!(got.get(0, 1), 0.0);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let m = Matrix::from_vec_unchecked(2, 2, vec![0.0, 1.0, f32::NEG_INFINITY, f32::NEG_INFINITY]);
        assert!(matches!(
            softmax_rows(&m),
            Err(NumericsError::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_vec_unchecked(1, 2, vec![0.0, f32::NAN]);
        assert!(matches!(softmax_rows(&m), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn cosine_self_is_exactly_one() {
        let a = vec![0.3f32, -1.7, 2.2];
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_45_degrees() {
        let got = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn cosine_zero_vector_is_error() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(NumericsError::UndefinedSimilarity)
        ));
    }

    #[test]
    fn interp_midpoint() {
        let m = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let got = interp_linear(&m, 3, true).unwrap();
        assert_eq!(got.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn interp_identity_when_same_len() {
        let m = Matrix::from_vec(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(interp_linear(&m, 3, true).unwrap(), m);
    }

    #[test]
    fn interp_affine_ramp() {
        // source rows [0],[3],[6] at coordinates 0,1,2; target index i maps to i*2/3
        let m = Matrix::from_vec(3, 1, vec![0.0, 3.0, 6.0]).unwrap();
        let got = interp_linear(&m, 4, true).unwrap();
        for (g, want) in got.data().iter().zip([0.0, 2.0, 4.0, 6.0]) {
            assert!((g - want).abs() < 1e-6, "{g} vs {want}");
        }
    }

    #[test]
    fn interp_too_short_is_error() {
        let m = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            interp_linear(&m, 4, true),
            Err(NumericsError::Shape { .. })
        ));
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for k in 0..a.cols() {
                    acc += a.get(i, k) as f64 * b.get(k, j) as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matmul_matches_naive_oracle(seed in 0u64..256) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::from_fn(16, 16, |_, _| rng.random_range(-2.0..2.0));
            let b = Matrix::from_fn(16, 16, |_, _| rng.random_range(-2.0..2.0));
            let got = matmul(&a, &b).unwrap();
            let want = naive_matmul(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                let rel = (g - w).abs() / w.abs().max(1e-3);
                prop_assert!(rel < 1e-5);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f32..30.0, 4..24),
            shift in -10.0f32..10.0,
        ) {
            let n = vals.len();
            let m = Matrix::from_vec(1, n, vals.clone()).unwrap();
            let got = softmax_rows(&m).unwrap();
            let sum: f64 = got.row(0).iter().map(|v| *v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(got.row(0).iter().all(|v| *v >= 0.0));

            let shifted = Matrix::from_vec(1, n, vals.iter().map(|v| v + shift).collect()).unwrap();
            let got2 = softmax_rows(&shifted).unwrap();
            for (a, b) in got.row(0).iter().zip(got2.row(0)) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn interp_rows_stay_in_bracket_hull(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 2..8),
            target in 2usize..20,
        ) {
            let m = Matrix::from_rows(&rows).unwrap();
            let got = interp_linear(&m, target, true).unwrap();
            let t = m.rows();
            for i in 0..target {
                let src = i as f64 * (t - 1) as f64 / (target - 1) as f64;
                let lo = (src.floor() as usize).min(t - 2);
                for j in 0..m.cols() {
                    let a = m.get(lo, j).min(m.get(lo + 1, j));
                    let b = m.get(lo, j).max(m.get(lo + 1, j));
                    prop_assert!(got.get(i, j) >= a - 1e-5 && got.get(i, j) <= b + 1e-5);
                }
            }
        }
    }
}
