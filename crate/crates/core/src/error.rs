use std::io;

use thiserror::Error;

pub type Result<T, E = FdmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FdmError {
    #[error("no document survived filtering")]
    EmptyCorpus,

    #[error("document of length {length} cannot produce a co-occurrence estimate (need at least 2 tokens)")]
    DegenerateDocument { length: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vocabulary size mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("objective became non-finite at step {step}; try a lower learning rate")]
    NonFiniteLoss { step: u64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FdmError {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            FdmError::EmptyCorpus => "empty_corpus",
            FdmError::DegenerateDocument { .. } => "degenerate_document",
            FdmError::InvalidConfig(_) => "invalid_config",
            FdmError::VocabMismatch { .. } => "vocab_mismatch",
            FdmError::DimensionMismatch(_) => "dimension_mismatch",
            FdmError::NonFiniteLoss { .. } => "non_finite_loss",
            FdmError::Format(_) => "format",
            FdmError::Io(_) => "io",
        }
    }

    /// Process exit code: 3 for numerical failure, 2 for everything data related.
    pub fn exit_code(&self) -> i32 {
        match self {
            FdmError::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn format_err(msg: impl Into<String>) -> FdmError {
    FdmError::Format(msg.into())
}
