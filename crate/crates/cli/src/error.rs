use std::io;
use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage, 2 config schema, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config { .. } => 2,
            CliError::Data(_) | CliError::Checkpoint { .. } | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<nodule_core::Error> for CliError {
    fn from(e: nodule_core::Error) -> Self {
        match e {
            nodule_core::Error::NonFiniteGradient(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
