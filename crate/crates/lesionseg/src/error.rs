use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit-code contract
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("import error: {0}")]
    Import(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("learning-rate selection failed: {0}")]
    LrSelection(String),

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl Error {
    /// Stable process exit code for scripting:
    /// 0 success, 2 config, 3 data, 4 training/numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Import(_) | Error::Checkpoint(_) => 3,
            Error::Shape(_)
            | Error::Training(_)
            | Error::Contract(_)
            | Error::LrSelection(_)
            | Error::Ensemble(_) => 4,
            Error::Io { .. } => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
