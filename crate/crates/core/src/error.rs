use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("header length {declared} exceeds file size {file_len}")]
    HeaderTooLong { declared: u64, file_len: u64 },
    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDType { name: String, dtype: String },
    #[error("span out of bounds for tensor {name}: {detail}")]
    SpanOutOfBounds { name: String, detail: String },
    #[error("unknown tensor: {0}")]
    UnknownTensor(String),
    #[error("tensor {name}: {expected} values expected for shape {shape:?}, got {actual}")]
    ValueCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {name}: value {value} overflows {dtype}")]
    Overflow {
        name: String,
        dtype: &'static str,
        value: f64,
    },
    #[error("shape mismatch for {name}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures of the environment rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
