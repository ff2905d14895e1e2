use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] morel_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record {name}: {reason}")]
    CorruptRecord { name: String, reason: String },
    #[error("residency ledger violation: {0}")]
    LedgerViolation(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
