use std::path::PathBuf;

use thiserror::Error;

use crate::model::Architecture;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DsebmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: objective is {objective}")]
    Divergence { epoch: usize, objective: f64 },

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch {
        expected: Architecture,
        found: Architecture,
    },

    #[error("sample kind does not match a {0} model")]
    SampleKind(Architecture),

    #[error("{path}: record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("insufficient outlier pool: need {needed}, have {available}")]
    InsufficientOutliers { needed: usize, available: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DsebmError {
    /// True for failures caused by arithmetic going non-finite.
    pub fn is_numerical(&self) -> bool {
        matches!(self, DsebmError::NonFinite(_) | DsebmError::Divergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, DsebmError>;
