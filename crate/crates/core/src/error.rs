use thiserror::Error;

#[derive(Debug, Error)]
pub enum DifError {
    #[error("parameter `{0}` is not registered")]
    UnknownParameter(String),

    #[error("parameter `{0}` is already registered")]
    DuplicateParameter(String),

    #[error("parameter `{name}`: expected {expected} values, got {got}")]
    ParameterLength {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("target `{target}` cannot {capability}")]
    MissingCapability {
        target: &'static str,
        capability: &'static str,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("unsupported format version `{0}`")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DifError> = std::result::Result<T, E>;
