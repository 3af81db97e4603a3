use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments violate an operation's preconditions (shapes, ranges).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed data file; `offset` is the byte position of the bad field.
    #[error("{path}: {field} at byte offset {offset}: {reason}")]
    Parse {
        path: PathBuf,
        field: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    /// A network transformation would leave a layer without units.
    #[error("structural error: {0}")]
    Structural(String),

    /// Data is missing or unusable (empty split, absent files).
    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 2 configuration or arguments,
    /// 3 data and files, 4 structural.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Parse { .. } | Error::Io { .. } | Error::Data(_) | Error::Checkpoint(_) => 3,
            Error::Structural(_) => 4,
        }
    }
}
