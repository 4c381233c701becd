//! Beyond-context-window behaviour: per-position perplexity next to the
//! maximum cosine similarity between each position's vector and the
//! within-window vectors, plus the similarity structure of the positional
//! vectors' output logits.

use super::{AnalysisError, Result};
use crate::decompose::{DecompositionSet, PositionalDecomposition, StreamId};
use crate::model::{perplexity_over_samples, LanguageModel, TokenId, TransformerModel};
use crate::numerics::{cosine, Matrix};

#[derive(Debug, Clone)]
pub struct ExtrapolationCurves {
    /// (bucket-end position, PPL over the bucket).
    pub ppl_by_position: Vec<(usize, f64)>,
    /// (1-based position, max within-window cosine averaged over layers).
    pub max_sim_by_position: Vec<(usize, f64)>,
    /// Aggregate PPL over positions up to C.
    pub within_ppl: f64,
    /// Aggregate PPL over positions beyond C.
    pub beyond_ppl: f64,
}

/// Per-position PPL and positional-vector similarity at `t_len > C`.
///
/// `layers` selects which layer-output decompositions feed the similarity
/// aggregation (the convention: all layers from 2 up).
pub fn extrapolation_curves(
    model: &dyn LanguageModel,
    decompositions: &DecompositionSet,
    layers: &[usize],
    eval_samples: &[Vec<TokenId>],
    c: usize,
    bucket: usize,
) -> Result<ExtrapolationCurves> {
    if layers.is_empty() {
        return Err(AnalysisError::Config("need at least one layer".into()));
    }
    let t_len = decompositions
        .get(&StreamId::LayerOutput { layer: layers[0] })
        .ok_or_else(|| AnalysisError::Capability("missing layer-output decomposition".into()))?
        .t_len();
    if t_len <= c {
        return Err(AnalysisError::Config(format!(
            "decomposition spans {t_len} positions; extrapolation needs more than C = {c}"
        )));
    }

    let mut sim_sum = vec![0.0f64; t_len];
    for &layer in layers {
        let dec = decompositions
            .get(&StreamId::LayerOutput { layer })
            .ok_or_else(|| {
                AnalysisError::Capability(format!("missing layer_output.{layer} decomposition"))
            })?;
        let p = dec.p();
        for t in 0..t_len {
            let mut best = f64::NEG_INFINITY;
            for within in 0..c {
                let sim = cosine(p.row(within), p.row(t))?;
                if sim > best {
                    best = sim;
                }
            }
            sim_sum[t] += best;
        }
    }
    let max_sim_by_position: Vec<(usize, f64)> = sim_sum
        .iter()
        .enumerate()
        .map(|(t, s)| (t + 1, s / layers.len() as f64))
        .collect();

    let report = perplexity_over_samples(model, eval_samples, &[])?;
    let ppl_by_position = report.bucketed(bucket);
    let within_ppl = report.ppl_in_positions(1..c + 1).unwrap_or(f64::NAN);
    let beyond_ppl = report.ppl_in_positions(c + 1..t_len + 1).unwrap_or(f64::NAN);

    Ok(ExtrapolationCurves { ppl_by_position, max_sim_by_position, within_ppl, beyond_ppl })
}

#[derive(Debug, Clone)]
pub struct LogitSimilarity {
    /// T x T cosine matrix between per-position logit vectors.
    pub matrix: Matrix,
    /// Mean similarity between pairs both within the context window.
    pub within_mean: f64,
    /// Mean similarity between a within-window and a beyond-window position.
    pub cross_mean: f64,
    /// Mean similarity between pairs both beyond the window.
    pub beyond_mean: f64,
}

/// Feed the last layer's positional vectors through the model's final norm
/// and unembedding, then compare the resulting logit vectors across
/// positions. `raw` skips the final normalization.
pub fn ood_logit_similarity(
    dec_last: &PositionalDecomposition,
    model: &TransformerModel,
    c: usize,
    raw: bool,
) -> Result<LogitSimilarity> {
    let t_len = dec_last.t_len();
    if dec_last.dim() != model.config().model_dim {
        return Err(AnalysisError::Config("decomposition dim mismatch".into()));
    }
    let logits = crate::model::project_positional_logits(model, dec_last.p(), raw);

    let mut matrix = Matrix::zeros(t_len, t_len);
    for i in 0..t_len {
        matrix.set(i, i, 1.0);
        for j in 0..i {
            let sim = cosine(logits.row(i), logits.row(j))? as f32;
            matrix.set(i, j, sim);
            matrix.set(j, i, sim);
        }
    }

    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for i in 0..t_len {
        for j in 0..i {
            let class = match ((i + 1) <= c, (j + 1) <= c) {
                (true, true) => 0,
                (false, false) => 2,
                _ => 1,
            };
            sums[class] += matrix.get(i, j) as f64;
            counts[class] += 1;
        }
    }
    let mean = |k: usize| if counts[k] == 0 { f64::NAN } else { sums[k] / counts[k] as f64 };
    Ok(LogitSimilarity {
        matrix,
        within_mean: mean(0),
        cross_mean: mean(1),
        beyond_mean: mean(2),
    })
}
