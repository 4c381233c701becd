//! pvlab: a laboratory for the positional information hidden in decoder-only
//! transformer hidden states.
//!
//! The crate trains small transformer variants with pluggable positional
//! encodings (none / rotary / ALiBi) and attention patterns (full / windowed),
//! decomposes their hidden states into positional and semantic components via
//! sample means, measures how positional vectors form and what they do to
//! attention (sinks, long-term decay), and implements training-free context
//! window extension methods on top of the decomposition: positional vector
//! replacement and attention window extension, next to attention-scaling,
//! initial-scaling and dynamic-NTK baselines.
//!
//! Module map:
//! - [`numerics`]: dense matrix kernel (matmul, softmax, cosine, PCA, interpolation)
//! - [`model`]: the transformer itself — build, forward with interventions, train,
//!   sliding-window perplexity, checkpointing
//! - [`decompose`]: hidden-state banks and the mean-based decomposition
//! - [`analysis`]: the measurement suite (PCA scatter, distinct counts, ablations,
//!   attention component maps, extrapolation curves, logit similarity, effective
//!   interpolation ratio, the synthetic single-head experiment)
//! - [`extend`]: context-window extension wrappers
//! - [`harness`]: corpus ingestion, tokenizers, run configs, caching pipeline,
//!   CSV/SVG reports and the CLI plumbing

pub mod analysis;
mod container;
pub mod decompose;
pub mod extend;
pub mod harness;
pub mod model;
pub mod numerics;

pub use model::{AttnKind, LanguageModel, ModelConfig, PeKind, TransformerModel};
pub use numerics::Matrix;
