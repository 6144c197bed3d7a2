use std::path::PathBuf;

/// Errors raised across the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent shapes, out-of-range hyperparameters, bad geometry.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called outside its contract (wrong arity, missing state).
    #[error("usage error: {0}")]
    Usage(String),
    /// The request exceeds what an exact routine is allowed to enumerate.
    #[error("capability error: {0}")]
    Capability(String),
    /// Labels or samples outside the admissible range.
    #[error("data error: {0}")]
    Data(String),
    #[error("format error in {file}: {message} (offset {offset})")]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use usage_err;
