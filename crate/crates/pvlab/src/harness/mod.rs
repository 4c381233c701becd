//! The user-facing surface: corpus ingestion and tokenization, run
//! configuration, the caching experiment pipeline, and CSV/SVG report
//! emission.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod pipeline;
pub mod report;
pub mod svg;
pub mod tokenizer;

pub use config::{ExperimentEntry, RunConfig, TokenizerSpec};
pub use corpus::{ingest_corpus, synthetic_text, write_synthetic_corpus, TokenStream, WindowSampler};
pub use pipeline::{paper_variants, Pipeline};
pub use report::{CsvWriter, ExperimentReport, Manifest};
pub use tokenizer::{build_bpe_vocab, Tokenizer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration, missing file, unknown name: exit code 1 territory.
    #[error("validation error: {0}")]
    Validation(String),
    /// Bad input data (encoding, sizes).
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Decompose(#[from] crate::decompose::DecomposeError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// CLI exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) | HarnessError::Data(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
