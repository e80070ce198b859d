use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path} is held by another run (remove it if that run is gone, or pass --break-lock)")]
    Locked { path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] vmae_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 usage, 3 IO, 4 numeric fault.
    pub fn exit_code(&self) -> i32 {
        use vmae_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Locked { .. } | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Numeric(_) => 4,
                E::Io { .. } | E::Image { .. } | E::Checkpoint(_) | E::Parse { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
