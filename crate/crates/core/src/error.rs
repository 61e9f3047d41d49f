use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FalconError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FalconError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    Vocabulary { token: u32, vocab: usize },

    #[error("context overflow: {needed} positions requested, context length is {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion error for {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FalconError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        FalconError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            FalconError::Dimension { .. } => "dimension",
            FalconError::Numeric(_) => "numeric",
            FalconError::Vocabulary { .. } => "vocabulary",
            FalconError::ContextOverflow { .. } => "context_overflow",
            FalconError::Parse { .. } => "parse",
            FalconError::Validation(_) => "validation",
            FalconError::Domain(_) => "domain",
            FalconError::Contract(_) => "contract",
            FalconError::Config(_) => "config",
            FalconError::Checkpoint(_) => "checkpoint",
            FalconError::Ingestion { .. } => "ingestion",
            FalconError::Io(_) => "io",
        }
    }
}
