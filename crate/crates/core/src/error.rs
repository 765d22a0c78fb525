use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("preprocessing error: {0}")]
    Preprocessing(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("integrity error in {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("unsupported manifest version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("training error: {0}")]
    Training(String),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("timeout: {0}")]
    Timeout(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Integrity { .. } | Error::Version { .. } => 2,
            Error::Backend(_) | Error::Tensor(_) | Error::Training(_) | Error::Timeout(_) => 3,
            Error::Io(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
