use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("unsupported bit depth ({0} bits per sample)")]
    UnsupportedBitDepth(u32),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("point out of bounds: ({row}, {col}) not inside {height}x{width}")]
    PointOutOfBounds {
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },

    #[error("zero mass")]
    ZeroMass,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("not a GSTK file")]
    BadMagic,

    #[error("unsupported GSTK version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing transport kernel for sample {0}")]
    MissingKernel(usize),

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
