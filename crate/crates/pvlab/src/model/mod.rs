//! Desk-scale decoder-only transformer with pluggable positional encoding and
//! attention pattern, an intervention interface for component removal during
//! forward passes, training, sliding-window perplexity and checkpointing.
//!
//! Weights live in one flat `f32` buffer addressed through a tensor directory,
//! which keeps checkpointing, gradient bookkeeping and finite-difference
//! probing trivial.

mod checkpoint;
mod forward;
mod intervention;
mod perplexity;
mod train;

pub use forward::{
    alibi_slope, apply_rope, effective_rope_base, rope_tables, AttnOverrides, CaptureFlags,
    ForwardTrace, LayerQkv, PvrPlan, RopeOverride,
};
pub use intervention::{
    resolve_interventions, Component, InterventionAction, InterventionSpec, InterventionTarget,
    ResolvedPlan,
};
pub use perplexity::{perplexity, perplexity_over_samples, PerplexityConfig, PerplexityReport};
pub use train::{batch_loss, batch_loss_and_grads, train, GradBuffer, TrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid intervention: {0}")]
    Intervention(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("extension exhausted: sequence length {len} exceeds supported {max}")]
    ExtensionExhausted { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Positional encoding of a model variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeKind {
    /// No explicit positional encoding; positional information is implicit.
    NoPe,
    /// Rotary embedding applied to queries and keys.
    Rope { base: f64 },
    /// Per-head linear bias `-slope * (i - j)` added to attention logits.
    Alibi,
}

impl PeKind {
    pub fn rope() -> Self {
        PeKind::Rope { base: 10_000.0 }
    }
}

/// Attention pattern of a model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Full,
    /// Query `i` attends keys `j` with `max(1, i-W+1) <= j <= i` (1-based).
    Window { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub context_window: usize,
    pub pe_kind: PeKind,
    pub attn_kind: AttnKind,
    pub norm_eps: f32,
    pub tied_embeddings: bool,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk_default() -> Self {
        ModelConfig {
            layers: 8,
            heads: 8,
            model_dim: 256,
            ffn_dim: 1024,
            vocab: 4096,
            context_window: 256,
            pe_kind: PeKind::NoPe,
            attn_kind: AttnKind::Full,
            norm_eps: 1e-5,
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn window(&self) -> Option<usize> {
        match self.attn_kind {
            AttnKind::Window { size } => Some(size),
            AttnKind::Full => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(ModelError::Config("vocab must be >= 2".into()));
        }
        if self.context_window == 0 {
            return Err(ModelError::Config("context_window must be >= 1".into()));
        }
        if let AttnKind::Window { size } = self.attn_kind {
            if size == 0 || size > self.context_window {
                return Err(ModelError::Config(format!(
                    "window size {size} outside 1..={}",
                    self.context_window
                )));
            }
        }
        if let PeKind::Rope { base } = self.pe_kind {
            if !(base > 0.0) {
                return Err(ModelError::Config("rope base must be > 0".into()));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(ModelError::Config("norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Entry of the tensor directory: name, shape, offset into the flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Tensor directory for a config, in fixed serialization order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.model_dim;
    let f = config.ffn_dim;
    let v = config.vocab;
    let mut specs = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, rows: usize, cols: usize| {
        let s = TensorSpec { name, rows, cols, offset };
        offset += rows * cols;
        specs.push(s);
    };
    push("embedding".into(), v, d);
    for l in 1..=config.layers {
        push(format!("layers.{l}.attn_norm"), 1, d);
        push(format!("layers.{l}.wq"), d, d);
        push(format!("layers.{l}.wk"), d, d);
        push(format!("layers.{l}.wv"), d, d);
        push(format!("layers.{l}.wo"), d, d);
        push(format!("layers.{l}.ffn_norm"), 1, d);
        push(format!("layers.{l}.w_gate"), d, f);
        push(format!("layers.{l}.w_up"), d, f);
        push(format!("layers.{l}.w_down"), f, d);
    }
    push("final_norm".into(), 1, d);
    if !config.tied_embeddings {
        push("unembedding".into(), d, v);
    }
    specs
}

/// Borrowed view of one tensor inside the flat parameter buffer.
#[derive(Clone, Copy)]
pub struct Tens<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f32],
}

impl<'a> Tens<'a> {
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-layer tensor views used by the forward and backward passes.
#[derive(Clone, Copy)]
pub struct LayerTens<'a> {
    pub attn_norm: &'a [f32],
    pub wq: Tens<'a>,
    pub wk: Tens<'a>,
    pub wv: Tens<'a>,
    pub wo: Tens<'a>,
    pub ffn_norm: &'a [f32],
    pub w_gate: Tens<'a>,
    pub w_up: Tens<'a>,
    pub w_down: Tens<'a>,
}

/// The model: a config plus one flat weight buffer and its directory.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    specs: Vec<TensorSpec>,
    by_name: HashMap<String, usize>,
    params: Vec<f32>,
}

impl TransformerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let specs = tensor_specs(&config);
        let total: usize = specs.iter().map(TensorSpec::len).sum();
        if params.len() != total {
            return Err(ModelError::Shape(format!(
                "parameter buffer holds {} values, directory expects {total}",
                params.len()
            )));
        }
        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(TransformerModel { config, specs, by_name, params })
    }

    pub fn tensor(&self, name: &str) -> Option<Tens<'_>> {
        let idx = *self.by_name.get(name)?;
        let s = &self.specs[idx];
        Some(Tens {
            rows: s.rows,
            cols: s.cols,
            data: &self.params[s.offset..s.offset + s.len()],
        })
    }

    pub(crate) fn t(&self, name: &str) -> Tens<'_> {
        self.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn embedding(&self) -> Tens<'_> {
        self.t("embedding")
    }

    /// `None` when the unembedding is tied to the embedding; the forward pass
    /// then uses the embedding rows as output classes.
    pub fn unembedding(&self) -> Option<Tens<'_>> {
        self.tensor("unembedding")
    }

    pub fn final_norm(&self) -> &[f32] {
        self.t("final_norm").data
    }

    /// Tensor views of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> LayerTens<'_> {
        LayerTens {
            attn_norm: self.t(&format!("layers.{l}.attn_norm")).data,
            wq: self.t(&format!("layers.{l}.wq")),
            wk: self.t(&format!("layers.{l}.wk")),
            wv: self.t(&format!("layers.{l}.wv")),
            wo: self.t(&format!("layers.{l}.wo")),
            ffn_norm: self.t(&format!("layers.{l}.ffn_norm")).data,
            w_gate: self.t(&format!("layers.{l}.w_gate")),
            w_up: self.t(&format!("layers.{l}.w_up")),
            w_down: self.t(&format!("layers.{l}.w_down")),
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

/// Initialize a model deterministically from a seed.
///
/// Truncated normal (sigma 0.02, clipped at two sigma) for projections and
/// embeddings, ones for norm scales; attention output and FFN down projections
/// are additionally scaled by `1/sqrt(2L)` to keep residual growth in check.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    config.validate()?;
    let specs = tensor_specs(config);
    let total: usize = specs.iter().map(TensorSpec::len).sum();
    let mut params = vec![0.0f32; total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let residual_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
    for spec in &specs {
        let out = &mut params[spec.offset..spec.offset + spec.len()];
        if spec.name.ends_with("norm") {
            out.fill(1.0);
            continue;
        }
        let scale = if spec.name.ends_with(".wo") || spec.name.ends_with(".w_down") {
            residual_scale
        } else {
            1.0
        };
        for v in out.iter_mut() {
            let mut z = normal.sample(&mut rng);
            while z.abs() > 0.04 {
                z = normal.sample(&mut rng);
            }
            *v = (z * scale) as f32;
        }
    }
    TransformerModel::from_parts(config.clone(), params)
}

/// Forward pass with explicit attention overrides; the extension wrappers'
/// entry point.
pub(crate) fn forward_with_overrides(
    model: &TransformerModel,
    tokens: &[TokenId],
    plan: &ResolvedPlan,
    capture: CaptureFlags,
    overrides: &AttnOverrides,
) -> Result<ForwardTrace> {
    forward::forward_pass(model, tokens, plan, capture, overrides, None)
}

/// Final-norm-then-unembed projection of arbitrary D-dim rows, used to look
/// at positional vectors in logit space. `raw` skips the normalization.
pub fn project_positional_logits(
    model: &TransformerModel,
    rows: &crate::numerics::Matrix,
    raw: bool,
) -> crate::numerics::Matrix {
    if raw {
        forward::unembed(model, rows)
    } else {
        let mut normed = crate::numerics::Matrix::zeros(rows.rows(), rows.cols());
        let mut inv_rms = Vec::new();
        forward::rms_norm_rows(
            rows,
            model.final_norm(),
            model.config().norm_eps,
            &mut normed,
            &mut inv_rms,
        );
        forward::unembed(model, &normed)
    }
}

/// Anything that can run a forward pass: the base transformer or an
/// extension wrapper around one.
pub trait LanguageModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    fn forward(
        &self,
        tokens: &[TokenId],
        interventions: &[InterventionSpec],
        capture: CaptureFlags,
    ) -> Result<ForwardTrace>;

    /// Short tag used in report file names.
    fn describe(&self) -> String;

    /// Longest sequence this model accepts, if bounded (extension wrappers).
    fn max_supported_len(&self) -> Option<usize> {
        None
    }
}

impl LanguageModel for TransformerModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(
        &self,
        tokens: &[TokenId],
        interventions: &[InterventionSpec],
        capture: CaptureFlags,
    ) -> Result<ForwardTrace> {
        let plan = resolve_interventions(self.config(), tokens.len(), interventions)?;
        forward::forward_pass(self, tokens, &plan, capture, &AttnOverrides::default(), None)
    }

    fn describe(&self) -> String {
        let pe = match self.config.pe_kind {
            PeKind::NoPe => "nope".to_string(),
            PeKind::Rope { .. } => "rope".to_string(),
            PeKind::Alibi => "alibi".to_string(),
        };
        match self.config.attn_kind {
            AttnKind::Full => pe,
            AttnKind::Window { size } => format!("{pe}-w{size}"),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::tiny_config;
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config();
        let a = build_model(&cfg, 3).unwrap();
        let b = build_model(&cfg, 3).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn different_seed_changes_weights() {
        let cfg = tiny_config();
        let a = build_model(&cfg, 3).unwrap();
        let b = build_model(&cfg, 4).unwrap();
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn head_dim_arithmetic() {
        let mut cfg = tiny_config();
        cfg.model_dim = 128;
        cfg.heads = 4;
        assert_eq!(cfg.head_dim(), 32);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(matches!(build_model(&cfg, 0), Err(ModelError::Config(_))));

        let mut cfg = tiny_config();
        cfg.attn_kind = AttnKind::Window { size: 0 };
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.attn_kind = AttnKind::Window { size: 17 };
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.pe_kind = PeKind::Rope { base: -1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tensor_directory_is_contiguous() {
        let cfg = tiny_config();
        let specs = tensor_specs(&cfg);
        let mut offset = 0;
        for s in &specs {
            assert_eq!(s.offset, offset);
            offset += s.len();
        }
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.params().len(), offset);
    }
}
