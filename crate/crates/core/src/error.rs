//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A file did not conform to the expected binary or text format.
    #[error("format error: {0}")]
    Format(String),

    /// A loaded model failed cross-validation of its tensors.
    #[error("model validation error: {0}")]
    Validation(String),

    /// Caller-supplied data is out of range (token ids, empty input, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A text file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A 32-bit accumulator overflowed in the quantized kernel.
    #[error("accumulator overflow: {0}")]
    Overflow(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
