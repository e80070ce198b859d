use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input value outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Shapes, counts, or index sets that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// Image dimensions incompatible with the patch grid.
    #[error("image {axis} = {size} is not divisible by patch size {patch}")]
    NotDivisible { axis: &'static str, size: usize, patch: usize },

    #[error("config error: {0}")]
    Config(String),

    /// Non-finite or degenerate numbers.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in {source_name} at record {record}: {message}")]
    Parse { source_name: String, record: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(source_name: impl Into<String>, record: usize, message: impl Into<String>) -> Self {
        Error::Parse { source_name: source_name.into(), record, message: message.into() }
    }
}
