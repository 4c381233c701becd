//! Offline attention recomputation from retained per-sample queries and keys,
//! with decomposed components optionally stripped, plus the sink-strength and
//! long-term-decay metrics read off the averaged map.

use super::{AnalysisError, Result};
use crate::decompose::{DecompositionSet, HiddenStateBank, StreamId};
use crate::model::{alibi_slope, rope_tables, ModelConfig, PeKind};
use crate::numerics::{dot_f64, softmax_row, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSetting {
    Original,
    WoSemanticVector,
    WoPositionalVector,
    WoPositionalBasis,
}

impl MapSetting {
    pub fn label(&self) -> &'static str {
        match self {
            MapSetting::Original => "original",
            MapSetting::WoSemanticVector => "wo_semantic_vector",
            MapSetting::WoPositionalVector => "wo_positional_vector",
            MapSetting::WoPositionalBasis => "wo_positional_basis",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionProfile {
    pub setting: MapSetting,
    pub layer: usize,
    /// Heads averaged into this map (1-based).
    pub heads: Vec<usize>,
    /// Averaged attention probabilities, `first_n x first_n`.
    pub map: Matrix,
    /// Mean attention mass on the first `initial_k` keys from queries past
    /// position 8.
    pub sink_strength: f64,
    /// Mean per-query-row least-squares slope of log attention against
    /// relative distance (sink columns excluded).
    pub decay_slope: f64,
}

/// Strip a component from every retained sample of a stream.
fn strip(
    samples: &[Matrix],
    first_n: usize,
    setting: MapSetting,
    dec: Option<&crate::decompose::PositionalDecomposition>,
) -> Result<Vec<Matrix>> {
    let needs = !matches!(setting, MapSetting::Original);
    let dec = match (needs, dec) {
        (false, _) => None,
        (true, Some(d)) => Some(d),
        (true, None) => {
            return Err(AnalysisError::Capability(
                "stripping a component needs the stream's decomposition".into(),
            ))
        }
    };
    Ok(samples
        .iter()
        .map(|s| {
            let mut out = s.slice_rows(0..first_n);
            if let Some(d) = dec {
                for t in 0..first_n {
                    let row = out.row_mut(t);
                    match setting {
                        MapSetting::Original => {}
                        MapSetting::WoSemanticVector => row.copy_from_slice(&d.p().row(t)[..row.len()]),
                        MapSetting::WoPositionalVector => {
                            for (v, p) in row.iter_mut().zip(d.p().row(t)) {
                                *v -= p;
                            }
                        }
                        MapSetting::WoPositionalBasis => {
                            for (v, m) in row.iter_mut().zip(d.m().row(t)) {
                                *v -= m;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect())
}

/// Recompute softmax attention from (possibly component-stripped) per-sample
/// q/k, applying the model's positional mechanism, and average the maps over
/// samples and the given heads.
///
/// `q_banks`/`k_banks` hold retained banks aligned with `heads` (1-based head
/// indices of `layer`).
pub fn attention_component_maps(
    config: &ModelConfig,
    layer: usize,
    heads: &[usize],
    q_banks: &[&HiddenStateBank],
    k_banks: &[&HiddenStateBank],
    decompositions: &DecompositionSet,
    setting: MapSetting,
    first_n: usize,
    initial_k: usize,
) -> Result<AttentionProfile> {
    if heads.is_empty() || q_banks.len() != heads.len() || k_banks.len() != heads.len() {
        return Err(AnalysisError::Config("heads and banks must align".into()));
    }
    let dh = config.head_dim();
    let window = config.window().unwrap_or(usize::MAX).max(1);
    let rope = match config.pe_kind {
        PeKind::Rope { base } => Some(rope_tables(first_n, dh, base)),
        _ => None,
    };

    let mut map_sum = vec![0.0f64; first_n * first_n];
    let mut n_maps = 0usize;
    for (slot, &head) in heads.iter().enumerate() {
        let q_bank = q_banks[slot];
        let k_bank = k_banks[slot];
        let (q_samples, k_samples) = match (q_bank.retained(), k_bank.retained()) {
            (Some(q), Some(k)) => (q, k),
            _ => {
                return Err(AnalysisError::Capability(
                    "attention maps need banks with retained samples".into(),
                ))
            }
        };
        if q_bank.t_len() < first_n || k_bank.t_len() < first_n {
            return Err(AnalysisError::Config(format!(
                "banks span {} positions, map needs {first_n}",
                q_bank.t_len()
            )));
        }
        let q_dec = decompositions.get(&StreamId::Query { layer, head });
        let k_dec = decompositions.get(&StreamId::Key { layer, head });
        let q_stripped = strip(q_samples, first_n, setting, q_dec)?;
        let k_stripped = strip(k_samples, first_n, setting, k_dec)?;

        let slope = match config.pe_kind {
            PeKind::Alibi => Some(alibi_slope(head, config.heads)),
            _ => None,
        };
        let mut row_buf = vec![0.0f32; first_n];
        let mut prob_buf = vec![0.0f32; first_n];
        for (mut q, mut k) in q_stripped.into_iter().zip(k_stripped) {
            if let Some((cos, sin)) = &rope {
                crate::model::apply_rope(&mut q, cos, sin);
                crate::model::apply_rope(&mut k, cos, sin);
            }
            for i in 0..first_n {
                let lo = i.saturating_sub(window - 1);
                for j in lo..=i {
                    let mut v = dot_f64(q.row(i), k.row(j)) / (dh as f64).sqrt();
                    if let Some(s) = slope {
                        v -= s * (i - j) as f64;
                    }
                    row_buf[j] = v as f32;
                }
                softmax_row(&row_buf[lo..=i], &mut prob_buf[lo..=i])?;
                for j in lo..=i {
                    map_sum[i * first_n + j] += prob_buf[j] as f64;
                }
            }
            n_maps += 1;
        }
    }
    let inv = 1.0 / n_maps as f64;
    let map = Matrix::from_vec_unchecked(
        first_n,
        first_n,
        map_sum.iter().map(|v| (v * inv) as f32).collect(),
    );
    let sink_strength = sink_strength(&map, initial_k);
    let decay_slope = decay_slope(&map, initial_k);
    Ok(AttentionProfile {
        setting,
        layer,
        heads: heads.to_vec(),
        map,
        sink_strength,
        decay_slope,
    })
}

/// Mean attention mass on keys `1..=initial_k` from queries past position 8.
pub fn sink_strength(map: &Matrix, initial_k: usize) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 8..map.rows() {
        let mass: f64 = map.row(i)[..initial_k.min(i + 1)]
            .iter()
            .map(|v| *v as f64)
            .sum();
        sum += mass;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over query rows of the least-squares slope of `ln(attn)` against
/// relative distance, over cells with key index past the sink columns and
/// distance in `[8, first_n/2]`.
pub fn decay_slope(map: &Matrix, initial_k: usize) -> f64 {
    let first_n = map.rows();
    let max_dist = first_n / 2;
    let mut slopes = Vec::new();
    for i in 0..first_n {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for j in (initial_k)..i {
            let dist = i - j;
            if dist < 8 || dist > max_dist {
                continue;
            }
            let a = map.get(i, j) as f64;
            if a > 0.0 {
                xs.push(dist as f64);
                ys.push(a.ln());
            }
        }
        if xs.len() >= 2 {
            slopes.push(least_squares_slope(&xs, &ys));
        }
    }
    if slopes.is_empty() {
        0.0
    } else {
        slopes.iter().sum::<f64>() / slopes.len() as f64
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{collect_bank, decompose, SliceWindows, StreamRequest};
    use crate::model::testutil::{cycle_tokens, tiny_config};
    use crate::model::{build_model, CaptureFlags, LanguageModel};

    #[test]
    fn uniform_qk_attention_is_uniform_with_zero_slope() {
        // all q/k rows identical: every visible key gets 1/i and the decay
        // slope is exactly zero
        let mut cfg = tiny_config();
        cfg.model_dim = 8;
        cfg.heads = 2;
        let first_n = 12;
        let q = Matrix::from_fn(first_n, 4, |_, _| 0.7);
        let bank = crate::decompose::HiddenStateBank::from_samples(
            StreamId::Query { layer: 1, head: 1 },
            &[q.clone()],
            true,
        );
        let kbank = crate::decompose::HiddenStateBank::from_samples(
            StreamId::Key { layer: 1, head: 1 },
            &[q],
            true,
        );
        let set = DecompositionSet::new();
        let profile = attention_component_maps(
            &cfg,
            1,
            &[1],
            &[&bank],
            &[&kbank],
            &set,
            MapSetting::Original,
            first_n,
            4,
        )
        .unwrap();
        for i in 0..first_n {
            for j in 0..=i {
                let want = 1.0 / (i + 1) as f32;
                assert!((profile.map.get(i, j) - want).abs() < 1e-6);
            }
        }
        assert_eq!(profile.decay_slope, 0.0);
        // sink strength of the uniform map is mean over i>8 of 4/(i+1)
        let want: f64 = (8..first_n).map(|i| 4.0 / (i + 1) as f64).sum::<f64>()
            / (first_n - 8) as f64;
        assert!((profile.sink_strength - want).abs() < 1e-6);
    }

    #[test]
    fn original_setting_reproduces_forward_attention() {
        for pe in [crate::model::PeKind::NoPe, crate::model::PeKind::rope()] {
            let mut cfg = tiny_config();
            cfg.pe_kind = pe;
            let model = build_model(&cfg, 71).unwrap();
            let tokens = cycle_tokens(64, cfg.vocab);
            let first_n = 8;
            let n = 4;
            let (layer, head) = (2usize, 2usize);

            let requests = [
                StreamRequest::retained(StreamId::Query { layer, head }),
                StreamRequest::retained(StreamId::Key { layer, head }),
            ];
            let banks = collect_bank(
                &model,
                &SliceWindows { tokens: &tokens },
                n,
                first_n,
                &requests,
                &[],
            )
            .unwrap();
            let set = DecompositionSet::new();
            let profile = attention_component_maps(
                &cfg,
                layer,
                &[head],
                &[&banks[0]],
                &[&banks[1]],
                &set,
                MapSetting::Original,
                first_n,
                4,
            )
            .unwrap();

            // oracle: average the forward pass's captured attention maps
            let mut want = vec![0.0f64; first_n * first_n];
            for i in 0..n {
                let trace = model
                    .forward(&tokens[i * first_n..(i + 1) * first_n], &[], CaptureFlags::all())
                    .unwrap();
                let attn = &trace.attention.as_ref().unwrap()[layer - 1][head - 1];
                for (w, &v) in want.iter_mut().zip(attn.data()) {
                    *w += v as f64;
                }
            }
            for (got, w) in profile.map.data().iter().zip(&want) {
                assert!(
                    (*got as f64 - w / n as f64).abs() < 1e-4,
                    "map mismatch: {got} vs {}",
                    w / n as f64
                );
            }
        }
    }

    #[test]
    fn stripping_without_decomposition_errors() {
        let cfg = tiny_config();
        let q = Matrix::from_fn(12, 4, |i, j| (i + j) as f32);
        let bank = crate::decompose::HiddenStateBank::from_samples(
            StreamId::Query { layer: 1, head: 1 },
            &[q.clone()],
            true,
        );
        let kbank = crate::decompose::HiddenStateBank::from_samples(
            StreamId::Key { layer: 1, head: 1 },
            &[q],
            true,
        );
        let set = DecompositionSet::new();
        assert!(attention_component_maps(
            &cfg,
            1,
            &[1],
            &[&bank],
            &[&kbank],
            &set,
            MapSetting::WoPositionalBasis,
            12,
            4,
        )
        .is_err());
    }

    #[test]
    fn stripped_positional_vector_changes_map() {
        let cfg = tiny_config();
        let model = build_model(&cfg, 71).unwrap();
        let tokens = cycle_tokens(64, cfg.vocab);
        let first_n = 8;
        let (layer, head) = (1usize, 1usize);
        let requests = [
            StreamRequest::retained(StreamId::Query { layer, head }),
            StreamRequest::retained(StreamId::Key { layer, head }),
        ];
        let banks = collect_bank(
            &model,
            &SliceWindows { tokens: &tokens },
            4,
            first_n,
            &requests,
            &[],
        )
        .unwrap();
        let mut set = DecompositionSet::new();
        set.insert(decompose(&banks[0], first_n).unwrap());
        set.insert(decompose(&banks[1], first_n).unwrap());
        let orig = attention_component_maps(
            &cfg, layer, &[head], &[&banks[0]], &[&banks[1]], &set,
            MapSetting::Original, first_n, 4,
        )
        .unwrap();
        let stripped = attention_component_maps(
            &cfg, layer, &[head], &[&banks[0]], &[&banks[1]], &set,
            MapSetting::WoPositionalVector, first_n, 4,
        )
        .unwrap();
        assert_ne!(orig.map.data(), stripped.map.data());
    }
}
