use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why Stage 1 stopped without producing a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AbortReason {
    NoPrimary,
    TooFew,
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::NoPrimary => f.write_str("NoPrimary"),
            AbortReason::TooFew => f.write_str("TooFew"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("capacity exceeded: {what} has {len}, limit {limit}")]
    Capacity {
        what: &'static str,
        len: usize,
        limit: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("undefined metric: {0}")]
    Metric(String),
    #[error("pipeline aborted: {0}")]
    Abort(AbortReason),
    #[error("{}: {source}", path.display())]
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

    /// True for failures caused by bad inputs rather than broken internal
    /// invariants.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Tensor(_) | Error::Contract(_))
    }
}
