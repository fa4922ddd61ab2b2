use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the engine.
///
/// The variants map onto three broad classes used by the command line:
/// usage/configuration mistakes, data or file-format problems, and numeric
/// failures (non-finite values during a forward or backward pass).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: String },

    #[error("format error at line {line}: {detail}")]
    Format { line: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model kind mismatch: file holds {found}, expected {expected}")]
    Kind { found: String, expected: String },
    #[error("shape mismatch for tensor {name}: file {found:?}, model {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor set mismatch: {0}")]
    Manifest(String),
    #[error("file truncated")]
    Truncated,
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numeric { .. } => 3,
            Error::Dimension { .. }
            | Error::Format { .. }
            | Error::Data(_)
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
