use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: {key}: {message}")]
    Config {
        path: String,
        line: usize,
        key: String,
        message: String,
    },

    #[error("invalid setting: {0}")]
    Usage(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(#[from] lqbss_core::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 1: usage or configuration, 2: data, 3: numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 1,
            CliError::Parse { .. } | CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
