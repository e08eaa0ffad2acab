use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("walsh-hadamard order {order} exceeds the maximum of {max}")]
    DimensionOverflow { order: u32, max: u32 },

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("token index {index} out of range for sequence length {len}")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("decode position {position} does not match cache length {cache_len}")]
    PositionMismatch { position: usize, cache_len: usize },

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
