//! The measurement suite: PCA scatter of positional vectors, distinct-vector
//! counts against the theoretical receptive field, the value-stream ablation
//! study, attention component maps with sink/decay metrics, extrapolation
//! curves, logit similarity across positions, the effective interpolation
//! ratio, and the synthetic single-head preference experiment.
//!
//! Every operation here is a pure function of frozen banks, decompositions
//! and models; file emission lives in the harness.

mod ablation;
mod attention_maps;
mod extrapolation;
mod positions;
mod ratio;
mod synthetic;

pub use ablation::{ablation_study, AblationConfig, AblationRow, AblationVariant};
pub use attention_maps::{attention_component_maps, AttentionProfile, MapSetting};
pub use extrapolation::{
    extrapolation_curves, ood_logit_similarity, ExtrapolationCurves, LogitSimilarity,
};
pub use positions::{distinct_count, pca_positions, DistinctCountRow, PcaPositions};
pub use ratio::{effective_interpolation_ratio, EffectiveRatio, RatioFlag};
pub use synthetic::{
    synthetic_preference_experiment, synthetic_uniform_oracle, SyntheticConfig, SyntheticPe,
    SyntheticResult,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Decompose(#[from] crate::decompose::DecomposeError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;
