//! Top-k PCA via covariance eigendecomposition.
//!
//! The inputs here are tall-thin position banks (at most a few thousand rows,
//! dimension <= a few hundred), so forming the covariance and running a cyclic
//! Jacobi eigensolver on it is both simple and fast enough.

use super::{matmul, Matrix, NumericsError, Result};

const MAX_SWEEPS: usize = 64;

/// Result of [`pca_topk`]: orthonormal component rows, the column mean that
/// was subtracted, and the nonincreasing explained variances.
#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub components: Matrix,
    pub mean: Vec<f32>,
    pub explained_variance: Vec<f32>,
}

impl PcaProjection {
    /// Project rows onto the components: `(rows - mean) * components^T`.
    pub fn project(&self, rows: &Matrix) -> Result<Matrix> {
        if rows.cols() != self.components.cols() {
            return Err(NumericsError::Shape {
                context: "pca project",
                detail: format!("dim {} vs {}", rows.cols(), self.components.cols()),
            });
        }
        let mut centered = rows.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(self.mean.iter()) {
                *v -= m;
            }
        }
        matmul(&centered, &self.components.transpose())
    }
}

/// Top-k principal components of the rows of `rows`.
pub fn pca_topk(rows: &Matrix, k: usize) -> Result<PcaProjection> {
    let n = rows.rows();
    let d = rows.cols();
    if n < 2 {
        return Err(NumericsError::Shape {
            context: "pca_topk",
            detail: format!("need >= 2 rows, got {n}"),
        });
    }
    if k == 0 || k > n.min(d) {
        return Err(NumericsError::Shape {
            context: "pca_topk",
            detail: format!("k={k} out of range for {n}x{d}"),
        });
    }

    let mean = super::column_means(rows);
    // Covariance in f64, normalised by n-1.
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for (c, (&v, m)) in centered.iter_mut().zip(rows.row(i).iter().zip(mean.iter())) {
            *c = v as f64 - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            let row = &mut cov[a * d..(a + 1) * d];
            for (b, cb) in centered.iter().enumerate() {
                row[b] += ca * cb;
            }
        }
    }
    let inv = 1.0 / (n - 1) as f64;
    cov.iter_mut().for_each(|v| *v *= inv);

    let (eigvals, eigvecs) = jacobi_eigen(&mut cov, d)?;

    // Sort descending by eigenvalue, deterministic tie-break on index.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));

    let mut components = Matrix::zeros(k, d);
    let mut explained = Vec::with_capacity(k);
    for (out_i, &src) in order.iter().take(k).enumerate() {
        explained.push(eigvals[src].max(0.0) as f32);
        // Eigenvector = column `src` of the accumulated rotation.
        let mut vec_d: Vec<f64> = (0..d).map(|r| eigvecs[r * d + src]).collect();
        // Deterministic sign: largest-magnitude entry is positive.
        let lead = vec_d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if vec_d[lead] < 0.0 {
            vec_d.iter_mut().for_each(|v| *v = -*v);
        }
        for (j, v) in vec_d.iter().enumerate() {
            components.set(out_i, j, *v as f32);
        }
    }

    Ok(PcaProjection {
        components,
        mean: mean.iter().map(|v| *v as f32).collect(),
        explained_variance: explained,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix stored row-major in
/// `a` (destroyed). Returns (eigenvalues, column eigenvectors).
fn jacobi_eigen(a: &mut [f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d == 1 {
        return Ok((vec![a[0]], v));
    }

    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (norm * 1e-14).max(f64::MIN_POSITIVE);

    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= tol / (d as f64) {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    Err(NumericsError::Convergence { iterations: MAX_SWEEPS })
}
