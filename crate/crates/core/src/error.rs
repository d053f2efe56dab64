use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid probability {0}; must lie strictly between 0 and 1")]
    InvalidProbability(f64),

    #[error("invalid degrees of freedom {0}")]
    InvalidDegrees(usize),

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("conditioning on every coordinate leaves nothing to condition")]
    EmptyRemainder,

    #[error("covariance head is amortized and needs encoder features")]
    MissingFeatures,

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("operation requires {expected} mode, model is in {got} mode")]
    WrongMode { expected: &'static str, got: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every concept has already been intervened on")]
    AllIntervened,

    #[error("concept {0} has already been intervened on")]
    AlreadyIntervened(usize),

    #[error("no intervention to undo")]
    NothingToUndo,

    #[error("unknown concept index {0}")]
    UnknownConcept(usize),

    #[error("empirical percentile strategy needs a calibrated percentile table")]
    MissingPercentileTable,

    #[error("strategy {0} cannot be used with a model that has no covariance")]
    IncompatibleStrategy(String),

    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid correlation: {0}")]
    InvalidCorrelation(String),

    #[error("parse error in {file} at row {row}, column {column}: {reason}")]
    Parse {
        file: String,
        row: usize,
        column: usize,
        reason: String,
    },

    #[error("curve needs at least two points")]
    TooFewPoints,

    #[error("runs come from different configurations: {0}")]
    MixedConfigs(String),

    #[error("unsupported model format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_config(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}
