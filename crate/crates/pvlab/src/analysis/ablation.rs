//! Value-stream ablation study: remove whole values or their decomposed
//! components at a position group, re-derive positional vectors from the
//! layer-averaged outputs, and report similarity to the clean vectors at late
//! positions together with held-out perplexity.

use super::Result;
use crate::decompose::{collect_bank, DecompositionSet, SampleSource, StreamId, StreamRequest};
use crate::model::{
    perplexity_over_samples, Component, InterventionAction, InterventionSpec, InterventionTarget,
    LanguageModel, TokenId,
};
use crate::numerics::{cosine, Matrix};
use std::ops::Range;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Original,
    WoValue,
    WoPositionalVector,
    WoPositionalBasis,
    WoSemanticVector,
}

impl AblationVariant {
    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Original => "original",
            AblationVariant::WoValue => "wo_value",
            AblationVariant::WoPositionalVector => "wo_positional_vector",
            AblationVariant::WoPositionalBasis => "wo_positional_basis",
            AblationVariant::WoSemanticVector => "wo_semantic_vector",
        }
    }

    fn component(&self) -> Option<Component> {
        match self {
            AblationVariant::Original => None,
            AblationVariant::WoValue => Some(Component::Whole),
            AblationVariant::WoPositionalVector => Some(Component::PositionalVector),
            AblationVariant::WoPositionalBasis => Some(Component::PositionalBasis),
            AblationVariant::WoSemanticVector => Some(Component::SemanticVector),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// 1-based half-open position group the ablation acted on.
    pub group: Range<usize>,
    /// Mean cosine between clean and ablated positional vectors at positions
    /// past `late_start`.
    pub sim: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    /// Position groups (1-based, half-open), e.g. the initial 1..5 and the
    /// secondary 5..C/8+1.
    pub groups: Vec<Range<usize>>,
    /// First 1-based position counted as "late" for the similarity metric.
    pub late_start: usize,
    /// Bank size for re-deriving positional vectors.
    pub bank_n: usize,
    /// Sequence length of bank and PPL samples.
    pub t_len: usize,
}

impl AblationConfig {
    /// The position-group convention, scaled by the context window: initial
    /// tokens 1..=4, secondary tokens 5..=C/8, late positions beyond C/8.
    pub fn for_context(c: usize, bank_n: usize) -> Self {
        let secondary_end = (c / 8).max(6);
        AblationConfig {
            groups: vec![1..5, 5..secondary_end + 1],
            late_start: secondary_end + 1,
            bank_n,
            t_len: c,
        }
    }
}

/// Layer-averaged positional vectors under the given interventions.
fn layer_averaged_p(
    model: &dyn LanguageModel,
    sampler: &dyn SampleSource,
    cfg: &AblationConfig,
    interventions: &[InterventionSpec],
) -> Result<Matrix> {
    let layers = model.config().layers;
    let requests: Vec<StreamRequest> = (1..=layers)
        .map(|l| StreamRequest::mean_only(StreamId::LayerOutput { layer: l }))
        .collect();
    let banks = collect_bank(model, sampler, cfg.bank_n, cfg.t_len, &requests, interventions)?;
    let d = model.config().model_dim;
    let mut avg = vec![0.0f64; cfg.t_len * d];
    for bank in &banks {
        for (a, s) in avg.iter_mut().zip(bank.sums()) {
            *a += s;
        }
    }
    let inv = 1.0 / (layers as f64 * banks[0].n_samples() as f64);
    Ok(Matrix::from_vec_unchecked(
        cfg.t_len,
        d,
        avg.iter().map(|v| (v * inv) as f32).collect(),
    ))
}

/// Run the ablation study: for every (variant, group), remove the variant's
/// component from the attention values at the group's positions in all
/// layers, then compare re-derived positional vectors and held-out PPL
/// against the clean run.
pub fn ablation_study(
    model: &dyn LanguageModel,
    value_decompositions: Arc<DecompositionSet>,
    sampler: &dyn SampleSource,
    eval_samples: &[Vec<TokenId>],
    variants: &[AblationVariant],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let n_layers = model.config().layers;
    let clean_p = layer_averaged_p(model, sampler, cfg, &[])?;
    let clean_ppl = perplexity_over_samples(model, eval_samples, &[])?.ppl;

    let late = cfg.late_start..cfg.t_len + 1;
    let mut rows = Vec::new();
    for &variant in variants {
        if variant == AblationVariant::Original {
            rows.push(AblationRow {
                variant,
                group: 0..0,
                sim: 1.0,
                ppl: clean_ppl,
            });
            continue;
        }
        for group in &cfg.groups {
            let interventions = match variant.component() {
                None => vec![],
                Some(component) => vec![InterventionSpec {
                    target: InterventionTarget::AttentionValue,
                    component,
                    action: InterventionAction::Remove,
                    positions: group.clone(),
                    layers: 1..n_layers + 1,
                    decomposition: Some(value_decompositions.clone()),
                }],
            };
            let sim = if group.is_empty() {
                1.0
            } else {
                let new_p = layer_averaged_p(model, sampler, cfg, &interventions)?;
                mean_late_cosine(&clean_p, &new_p, late.clone())?
            };
            let ppl = perplexity_over_samples(model, eval_samples, &interventions)?.ppl;
            rows.push(AblationRow { variant, group: group.clone(), sim, ppl });
        }
    }
    Ok(rows)
}

fn mean_late_cosine(a: &Matrix, b: &Matrix, late: Range<usize>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for pos in late {
        if pos > a.rows() {
            break;
        }
        sum += cosine(a.row(pos - 1), b.row(pos - 1))?;
        n += 1;
    }
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}
