use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty description")]
    EmptySequence,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch has no image-text pairs")]
    NoPairs,

    #[error("not enough identities: need {needed}, have {available}")]
    NotEnoughIdentities { needed: usize, available: usize },

    #[error("attention weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("model mode `{0}` has no trained relevance score head")]
    NoScoreHead(String),

    #[error("lexicon line {line}: {msg}")]
    Lexicon { line: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    DirectoryNotEmpty(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Non-finite loss or gradient during training.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_))
    }

    /// Bad configuration or arguments, as opposed to I/O or numeric failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Lexicon { .. } | Error::DirectoryNotEmpty(_)
        )
    }
}
