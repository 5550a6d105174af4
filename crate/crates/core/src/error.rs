use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, bad range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The requested configuration cannot be realized (e.g. ghost size does not divide the batch).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("stale activation cache: cache generation {cache}, parameters at generation {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("transform space is not enumerable: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("workers disagree after step {step}: {detail}")]
    Consistency { step: u64, detail: String },

    #[error("{path}: bad IDX magic {found:#010x}")]
    IdxFormat { path: PathBuf, found: u32 },

    #[error("{path}: truncated IDX file (expected {expected} bytes, found {found})")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
