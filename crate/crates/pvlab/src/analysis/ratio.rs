//! Effective interpolation ratio: how far a context-window extension
//! compresses positional vectors, measured by nearest-original-index lookup.

use super::{AnalysisError, Result};
use crate::numerics::{cosine, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioFlag {
    /// Some extended position mapped exactly to index C.
    Exact,
    /// No position mapped to C; the largest position mapping to an index
    /// within `epsilon` below C (or beyond) was used instead.
    Approximate { epsilon: usize },
    /// No position mapped anywhere near C.
    NotFound,
}

#[derive(Debug, Clone, Copy)]
pub struct EffectiveRatio {
    pub ratio: f64,
    pub flag: RatioFlag,
    /// 1-based extended position whose match defined the ratio (0 if none).
    pub argmax_position: usize,
}

const EPSILON_IDX: usize = 2;

/// `f(t) = argmax_i cos(p_orig[i], p_scaled[t])` (ties toward the smallest
/// index), then `ratio = max{t : f(t) = C} / C`. When no position maps
/// exactly to C the largest `t` mapping to an index at least `C - 2` is used
/// and the result is flagged approximate.
pub fn effective_interpolation_ratio(
    p_orig: &Matrix,
    p_scaled: &Matrix,
    c: usize,
) -> Result<EffectiveRatio> {
    if p_orig.rows() != p_scaled.rows() || p_orig.cols() != p_scaled.cols() {
        return Err(AnalysisError::Config(format!(
            "decomposition shapes differ: {}x{} vs {}x{}",
            p_orig.rows(),
            p_orig.cols(),
            p_scaled.rows(),
            p_scaled.cols()
        )));
    }
    let t_len = p_orig.rows();
    if c == 0 || c > t_len {
        return Err(AnalysisError::Config(format!("C {c} outside 1..={t_len}")));
    }

    // f(t) per extended position, 1-based
    let mut mapped = vec![0usize; t_len];
    for t in 0..t_len {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0usize;
        for i in 0..t_len {
            let sim = cosine(p_orig.row(i), p_scaled.row(t))
                .map_err(AnalysisError::from)?;
            if sim > best {
                best = sim;
                best_i = i;
            }
        }
        mapped[t] = best_i + 1;
    }

    let exact = (0..t_len).rev().find(|&t| mapped[t] == c);
    if let Some(t) = exact {
        return Ok(EffectiveRatio {
            ratio: (t + 1) as f64 / c as f64,
            flag: RatioFlag::Exact,
            argmax_position: t + 1,
        });
    }
    let near = (0..t_len).rev().find(|&t| mapped[t] + EPSILON_IDX >= c);
    match near {
        Some(t) => Ok(EffectiveRatio {
            ratio: (t + 1) as f64 / c as f64,
            flag: RatioFlag::Approximate { epsilon: EPSILON_IDX },
            argmax_position: t + 1,
        }),
        None => Ok(EffectiveRatio { ratio: f64::NAN, flag: RatioFlag::NotFound, argmax_position: 0 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonal_positions(rows: usize, dim: usize) -> Matrix {
        Matrix::from_fn(rows, dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_extension_has_ratio_one() {
        let p = orthogonal_positions(8, 8);
        let r = effective_interpolation_ratio(&p, &p, 8).unwrap();
        assert_eq!(r.flag, RatioFlag::Exact);
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn halved_index_map_recovers_ratio_two() {
        // p_scaled[t] = p_orig[ceil((t+1)/2)] over 16 positions of an
        // 8-vector orthogonal bank embedded in 16 rows
        let dim = 16;
        let p_orig = orthogonal_positions(16, dim);
        let p_scaled = Matrix::from_fn(16, dim, |t, j| {
            let src = (t + 1).div_ceil(2) - 1;
            if src == j {
                1.0
            } else {
                0.0
            }
        });
        let r = effective_interpolation_ratio(&p_orig, &p_scaled, 8).unwrap();
        assert_eq!(r.flag, RatioFlag::Exact);
        assert_eq!(r.ratio, 2.0);
        assert_eq!(r.argmax_position, 16);
    }

    #[test]
    fn ratio_recovered_for_r_in_1_2_4() {
        for r_true in [1usize, 2, 4] {
            let c = 8;
            let t_len = c * r_true;
            let dim = t_len;
            let p_orig = orthogonal_positions(t_len, dim);
            let p_scaled = Matrix::from_fn(t_len, dim, |t, j| {
                let src = (t + 1).div_ceil(r_true) - 1;
                if src == j {
                    1.0
                } else {
                    0.0
                }
            });
            let got = effective_interpolation_ratio(&p_orig, &p_scaled, c).unwrap();
            assert_eq!(got.flag, RatioFlag::Exact, "r={r_true}");
            assert_eq!(got.ratio, r_true as f64, "r={r_true}");
        }
    }

    #[test]
    fn invariant_under_positive_rescaling() {
        let p_orig = orthogonal_positions(12, 12);
        let p_scaled = Matrix::from_fn(12, 12, |t, j| {
            let src = (t + 1).div_ceil(2) - 1;
            if src == j {
                1.0
            } else {
                0.0
            }
        });
        let mut rescaled = p_scaled.clone();
        rescaled.data_mut().iter_mut().for_each(|v| *v *= 375.0);
        let a = effective_interpolation_ratio(&p_orig, &p_scaled, 6).unwrap();
        let b = effective_interpolation_ratio(&p_orig, &rescaled, 6).unwrap();
        assert_eq!(a.ratio, b.ratio);
        assert_eq!(a.flag, b.flag);
    }

    #[test]
    fn zero_vector_is_undefined_similarity() {
        let p = orthogonal_positions(4, 4);
        let mut z = p.clone();
        z.row_mut(2).fill(0.0);
        assert!(matches!(
            effective_interpolation_ratio(&p, &z, 4),
            Err(AnalysisError::Numerics(
                crate::numerics::NumericsError::UndefinedSimilarity
            ))
        ));
    }

    #[test]
    fn near_miss_is_flagged_approximate() {
        // no position maps to C=4 exactly, but one maps to 3 (= C-1)
        let dim = 6;
        let p_orig = orthogonal_positions(6, dim);
        let p_scaled = Matrix::from_fn(6, dim, |t, j| {
            let src = [0usize, 1, 2, 2, 2, 5][t];
            if src == j {
                1.0
            } else {
                0.0
            }
        });
        let got = effective_interpolation_ratio(&p_orig, &p_scaled, 4).unwrap();
        assert_eq!(got.flag, RatioFlag::Approximate { epsilon: EPSILON_IDX });
        // position 6 maps to index 6 >= C-2, the last qualifying position
        assert_eq!(got.argmax_position, 6);
    }
}
