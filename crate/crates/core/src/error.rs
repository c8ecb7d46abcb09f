use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on `{operand}`: got {got}, expected {expected}")]
    Shape { op: &'static str, operand: &'static str, got: String, expected: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("softmax row {0} is fully masked (empty attention context)")]
    EmptyAttention(usize),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint mismatch on parameter `{name}`: {reason}")]
    CheckpointMismatch { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        operand: &'static str,
        got: impl Into<String>,
        expected: impl Into<String>,
    ) -> Self {
        Error::Shape { op, operand, got: got.into(), expected: expected.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
