//! Training-free context-window extension wrappers.
//!
//! Two methods act through decomposed positional vectors — positional vector
//! replacement (rewrite one early layer's output with interpolated positional
//! vectors) and attention window extension (enlarge the attention window and
//! temper the logits) — next to three baselines: attention scaling, initial
//! scaling and dynamic-NTK rotary rescaling. Each wrapper produces an
//! immutable [`ExtendedModel`] that runs through the same forward machinery as
//! the base model, so perplexity and analyses consume both alike.

use crate::decompose::{DecompositionSet, PositionalDecomposition, StreamId};
use crate::model::{
    resolve_interventions, AttnKind, AttnOverrides, CaptureFlags, ForwardTrace, InterventionSpec,
    LanguageModel, ModelConfig, ModelError, PeKind, PvrPlan, Result, RopeOverride,
    TransformerModel,
};
use crate::numerics::{interp_linear, Matrix};
use std::sync::Arc;

/// Declarative description of an extension method, as it appears in run
/// configs and reports.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtensionSpec {
    AttentionScaling { lambda: f32 },
    InitialScaling { lambda: f32, initial_k: usize },
    DynamicNtk { target_len: usize },
    PositionalVectorReplacement { layer: usize, r: f64, alpha: f32, initial_k: usize },
    AttentionWindowExtension { r: f64, lambda: f32 },
}

impl ExtensionSpec {
    /// Short tag used in report file names, e.g. `pvr-l4-r2-a1.1`.
    pub fn tag(&self) -> String {
        match self {
            ExtensionSpec::AttentionScaling { lambda } => format!("attnscale-l{lambda}"),
            ExtensionSpec::InitialScaling { lambda, initial_k } => {
                format!("initscale-l{lambda}-k{initial_k}")
            }
            ExtensionSpec::DynamicNtk { target_len } => format!("dynntk-t{target_len}"),
            ExtensionSpec::PositionalVectorReplacement { layer, r, alpha, .. } => {
                format!("pvr-l{layer}-r{r}-a{alpha}")
            }
            ExtensionSpec::AttentionWindowExtension { r, lambda } => {
                format!("awe-r{r}-l{lambda}")
            }
        }
    }

    /// The scaling-method invariants: factors at least 1, ratios at least 1.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        match *self {
            ExtensionSpec::AttentionScaling { lambda }
            | ExtensionSpec::InitialScaling { lambda, .. } => {
                if lambda < 1.0 {
                    return bad(format!("scaling factor {lambda} must be >= 1"));
                }
            }
            ExtensionSpec::DynamicNtk { target_len } => {
                if target_len == 0 {
                    return bad("target length must be positive".into());
                }
            }
            ExtensionSpec::PositionalVectorReplacement { r, alpha, .. } => {
                if r < 1.0 {
                    return bad(format!("interpolation ratio {r} must be >= 1"));
                }
                if alpha < 1.0 {
                    return bad(format!("alpha {alpha} must be >= 1"));
                }
            }
            ExtensionSpec::AttentionWindowExtension { r, lambda } => {
                if r < 1.0 {
                    return bad(format!("window ratio {r} must be >= 1"));
                }
                if lambda < 1.0 {
                    return bad(format!("scaling factor {lambda} must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Wrap `model`. PVR needs the layer-output decomposition of its layer.
    pub fn build(
        &self,
        model: Arc<TransformerModel>,
        decompositions: Option<&DecompositionSet>,
    ) -> Result<ExtendedModel> {
        self.validate()?;
        match *self {
            ExtensionSpec::AttentionScaling { lambda } => attention_scaling(model, lambda),
            ExtensionSpec::InitialScaling { lambda, initial_k } => {
                initial_scaling(model, lambda, initial_k)
            }
            ExtensionSpec::DynamicNtk { target_len } => dynamic_ntk(model, target_len),
            ExtensionSpec::PositionalVectorReplacement { layer, r, alpha, initial_k } => {
                let dec = decompositions
                    .and_then(|d| d.get(&StreamId::LayerOutput { layer }))
                    .ok_or_else(|| {
                        ModelError::Capability(format!(
                            "positional vector replacement needs a layer_output.{layer} decomposition"
                        ))
                    })?;
                positional_vector_replacement(model, dec, layer, r, alpha, initial_k)
            }
            ExtensionSpec::AttentionWindowExtension { r, lambda } => {
                attention_window_extension(model, r, lambda)
            }
        }
    }
}

/// A base model plus attention overrides; immutable, shareable, and usable
/// anywhere a [`LanguageModel`] is.
pub struct ExtendedModel {
    base: Arc<TransformerModel>,
    overrides: AttnOverrides,
    tag: String,
    max_len: Option<usize>,
}

impl ExtendedModel {
    pub fn base(&self) -> &TransformerModel {
        &self.base
    }

    pub fn overrides(&self) -> &AttnOverrides {
        &self.overrides
    }

    /// The interpolated positional-vector bank, when this wrapper is a PVR.
    pub fn interpolated_bank(&self) -> Option<&Matrix> {
        self.overrides.pvr.as_ref().map(|p| &p.interpolated)
    }
}

impl LanguageModel for ExtendedModel {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn forward(
        &self,
        tokens: &[crate::model::TokenId],
        interventions: &[InterventionSpec],
        capture: CaptureFlags,
    ) -> Result<ForwardTrace> {
        let plan = resolve_interventions(self.base.config(), tokens.len(), interventions)?;
        crate::model::forward_with_overrides(&self.base, tokens, &plan, capture, &self.overrides)
    }

    fn describe(&self) -> String {
        format!("{}-{}", self.base.describe(), self.tag)
    }

    fn max_supported_len(&self) -> Option<usize> {
        self.max_len
    }
}

/// Multiply every attention logit by `lambda` before the softmax.
pub fn attention_scaling(model: Arc<TransformerModel>, lambda: f32) -> Result<ExtendedModel> {
    if !(lambda > 0.0) {
        return Err(ModelError::Config(format!("lambda {lambda} must be > 0")));
    }
    Ok(ExtendedModel {
        base: model,
        overrides: AttnOverrides { logit_scale: lambda, ..Default::default() },
        tag: format!("attnscale-l{lambda}"),
        max_len: None,
    })
}

/// Multiply only the logits into the first `initial_k` key columns by
/// `lambda`.
pub fn initial_scaling(
    model: Arc<TransformerModel>,
    lambda: f32,
    initial_k: usize,
) -> Result<ExtendedModel> {
    if !(lambda > 0.0) {
        return Err(ModelError::Config(format!("lambda {lambda} must be > 0")));
    }
    Ok(ExtendedModel {
        base: model,
        overrides: AttnOverrides {
            initial_scale: Some((lambda, initial_k)),
            ..Default::default()
        },
        tag: format!("initscale-l{lambda}-k{initial_k}"),
        max_len: None,
    })
}

/// Dynamic-NTK rotary rescaling toward `target_len`; the identity for
/// sequences within the context window.
pub fn dynamic_ntk(model: Arc<TransformerModel>, target_len: usize) -> Result<ExtendedModel> {
    let cfg = model.config();
    if !matches!(cfg.pe_kind, PeKind::Rope { .. }) {
        return Err(ModelError::Capability(
            "dynamic-NTK applies to rotary-embedding models only".into(),
        ));
    }
    if target_len < cfg.context_window {
        return Err(ModelError::Config(format!(
            "target length {target_len} below context window {}",
            cfg.context_window
        )));
    }
    let factor = target_len as f64 / cfg.context_window as f64;
    Ok(ExtendedModel {
        base: model,
        overrides: AttnOverrides {
            rope_override: Some(RopeOverride::DynamicNtk { factor }),
            ..Default::default()
        },
        tag: format!("dynntk-t{target_len}"),
        max_len: None,
    })
}

/// Rewrite the output of one layer: subtract the original positional vector
/// and add `alpha` times the linearly interpolated one. The first `initial_k`
/// positions stay untouched. Supports sequences up to
/// `r*(C - initial_k) + initial_k` tokens.
pub fn positional_vector_replacement(
    model: Arc<TransformerModel>,
    decomposition: &PositionalDecomposition,
    layer: usize,
    r: f64,
    alpha: f32,
    initial_k: usize,
) -> Result<ExtendedModel> {
    let cfg = model.config();
    let c = cfg.context_window;
    if layer < 1 || layer > cfg.layers {
        return Err(ModelError::Config(format!(
            "replacement layer {layer} outside 1..={}",
            cfg.layers
        )));
    }
    if decomposition.stream() != (StreamId::LayerOutput { layer }) {
        return Err(ModelError::Capability(format!(
            "decomposition is for {}, replacement needs layer_output.{layer}",
            decomposition.stream()
        )));
    }
    if decomposition.dim() != cfg.model_dim {
        return Err(ModelError::Capability(format!(
            "decomposition dim {} does not match model dim {}",
            decomposition.dim(),
            cfg.model_dim
        )));
    }
    if decomposition.t_len() < c {
        return Err(ModelError::Capability(format!(
            "decomposition spans {} positions, needs at least the context window {c}",
            decomposition.t_len()
        )));
    }
    if !(r >= 1.0) || initial_k >= c {
        return Err(ModelError::Config("need r >= 1 and initial_k < context window".into()));
    }
    let source = decomposition.p().slice_rows(initial_k..c);
    let target_len = ((c - initial_k) as f64 * r).round() as usize;
    let interpolated = interp_linear(&source, target_len, true)?;
    let max_len = initial_k + target_len;
    Ok(ExtendedModel {
        base: model,
        overrides: AttnOverrides {
            pvr: Some(PvrPlan {
                layer,
                alpha,
                initial_k,
                bank: decomposition.p().clone(),
                interpolated,
            }),
            ..Default::default()
        },
        tag: format!("pvr-l{layer}-r{r}-a{alpha}"),
        max_len: Some(max_len),
    })
}

/// Enlarge a window model's attention window to `floor(r*W)` and scale all
/// logits by `lambda`.
pub fn attention_window_extension(
    model: Arc<TransformerModel>,
    r: f64,
    lambda: f32,
) -> Result<ExtendedModel> {
    let cfg = model.config();
    let AttnKind::Window { size } = cfg.attn_kind else {
        return Err(ModelError::Capability(
            "attention window extension applies to window-attention models only".into(),
        ));
    };
    if !(r >= 1.0) || !(lambda > 0.0) {
        return Err(ModelError::Config("need r >= 1 and lambda > 0".into()));
    }
    let new_window = ((size as f64) * r).floor() as usize;
    Ok(ExtendedModel {
        base: model,
        overrides: AttnOverrides {
            window_override: Some(new_window.max(1)),
            logit_scale: lambda,
            ..Default::default()
        },
        tag: format!("awe-r{r}-l{lambda}"),
        max_len: None,
    })
}

/// PPL at extended length per candidate replacement layer; returns the rows
/// and the arg-min layer.
pub fn replacement_layer_sweep(
    model: &Arc<TransformerModel>,
    decompositions: &DecompositionSet,
    candidate_layers: &[usize],
    r: f64,
    alpha: f32,
    initial_k: usize,
    eval_samples: &[Vec<crate::model::TokenId>],
) -> Result<(Vec<(usize, f64)>, usize)> {
    let mut rows = Vec::with_capacity(candidate_layers.len());
    for &layer in candidate_layers {
        let spec = ExtensionSpec::PositionalVectorReplacement { layer, r, alpha, initial_k };
        let wrapped = spec.build(model.clone(), Some(decompositions))?;
        let report = crate::model::perplexity_over_samples(&wrapped, eval_samples, &[])?;
        rows.push((layer, report.ppl));
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(l, _)| *l)
        .unwrap_or(0);
    Ok((rows, best))
}

/// Effective interpolation ratio per layer between an original and an
/// extended decomposition set (layer outputs).
pub fn ratio_per_layer(
    original: &DecompositionSet,
    extended: &DecompositionSet,
    layers: &[usize],
    c: usize,
) -> Result<Vec<(usize, crate::analysis::EffectiveRatio)>> {
    let mut out = Vec::with_capacity(layers.len());
    for &layer in layers {
        let id = StreamId::LayerOutput { layer };
        let (orig, ext) = match (original.get(&id), extended.get(&id)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(ModelError::Capability(format!(
                    "both decompositions must cover layer_output.{layer}"
                )))
            }
        };
        let ratio = crate::analysis::effective_interpolation_ratio(orig.p(), ext.p(), c)
            .map_err(|e| ModelError::Capability(e.to_string()))?;
        out.push((layer, ratio));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
