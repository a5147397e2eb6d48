use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: {what} ({value}) is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}
