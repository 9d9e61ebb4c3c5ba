use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint: expected magic \"QMRS\", found {found:?}")]
    BadMagic { found: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated: header declares {expected} bytes but {actual} are present")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] maskrefine_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
