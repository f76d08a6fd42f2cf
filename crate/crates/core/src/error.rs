use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding an `AVB1` bag file or a checkpoint.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("non-finite value in {section} at index {index}")]
    NonFinite { section: &'static str, index: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid label byte {0}, expected -1 or +1")]
    InvalidLabel(i8),
    #[error("ground-truth index {index} out of range for {len} proposals")]
    IndexOutOfRange { index: u32, len: usize },
    #[error("invalid ground-truth flag {0}")]
    InvalidFlag(u8),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("bag {id}: {source}")]
    Bag {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step} (batch bags: {batch:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        batch: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
