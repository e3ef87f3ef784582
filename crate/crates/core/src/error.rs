use thiserror::Error;

/// Errors produced by the alignment library and the CLI built on top of it.
#[derive(Debug, Error)]
pub enum RcaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty context set: {0}")]
    EmptyContext(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate (zero-norm) embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("vocabulary has {available} entries but {requested} were requested")]
    InsufficientVocabulary { available: usize, requested: usize },

    #[error("invalid weight {value} at position {index}; weights must be positive and finite")]
    InvalidWeight { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RcaError> = std::result::Result<T, E>;

impl RcaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        RcaError::Dimension(msg.into())
    }
}
