use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A class index or similar lookup is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// The tape is in the wrong state for the request.
    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset, image or checkpoint file could not be parsed.
    #[error("load error in {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    /// A loss term went non-finite during training.
    #[error("numerical failure: loss term `{term}` is not finite")]
    Numerical { term: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
