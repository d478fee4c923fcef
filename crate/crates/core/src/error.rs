use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DbmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Parse { path: PathBuf, row: usize, message: String },

    #[error("{path}: dimension mismatch, expected {expected} columns but found {found}")]
    DimensionMismatch { path: PathBuf, expected: usize, found: usize },

    #[error("{path}, row {row}, column {column}: non-finite value")]
    NonFinite { path: PathBuf, row: usize, column: usize },

    #[error("{path}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, label: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DbmError>,
    },
}

impl DbmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DbmError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DbmError::Json { path: path.into(), source }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        DbmError::Stage { stage, source: Box::new(self) }
    }

    /// Numerical aborts are reported separately from data/validation errors.
    pub fn is_numerical(&self) -> bool {
        match self {
            DbmError::Numerical(_) => true,
            DbmError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DbmError::Io { .. } => "io",
            DbmError::Json { .. } => "json",
            DbmError::Parse { .. } => "parse",
            DbmError::DimensionMismatch { .. } => "dimension_mismatch",
            DbmError::NonFinite { .. } => "non_finite",
            DbmError::UnknownLabel { .. } => "unknown_label",
            DbmError::EmptyDataset => "empty_dataset",
            DbmError::Invalid(_) => "invalid",
            DbmError::Config(_) => "config",
            DbmError::Numerical(_) => "numerical",
            DbmError::Stage { source, .. } => source.kind(),
        }
    }
}
