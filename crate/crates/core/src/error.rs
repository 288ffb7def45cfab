use std::path::PathBuf;

use thiserror::Error;

use crate::autograd::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) => 4,
            Error::Partition(_) | Error::Split(_) => 5,
            Error::Tensor(_) | Error::Aggregation(_) | Error::Invariant(_) => 6,
            Error::Round { source, .. } => source.exit_code(),
        }
    }
}
