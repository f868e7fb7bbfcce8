use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A configuration value is missing, malformed, or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A dataset file could not be read or decoded.
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    /// A referenced file or directory does not exist.
    #[error("not found: {0}")]
    NotFound(PathBuf),

    /// Checkpoint container is corrupt or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training or verification produced a non-finite or failing value.
    #[error("numerical failure: {0}")]
    Numerical(String),

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
}
