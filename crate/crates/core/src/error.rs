use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (jitter reached {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid simplex vector: {0}")]
    InvalidSimplex(String),

    #[error("expected a {expected}-component vector, got {got}")]
    WrongDimension { expected: usize, got: usize },

    #[error("test targets have zero variance")]
    DegenerateTargets,

    #[error("axis `{0}` has zero spread")]
    DegenerateAxis(&'static str),

    #[error("quantile must lie in (0, 1], got {0}")]
    InvalidQuantile(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("parse error on row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("model file schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that come from the numerical core rather than from
    /// user-provided files or arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::OptimizationFailed(_)
                | Error::InvalidHyperparameter(_)
        )
    }
}
