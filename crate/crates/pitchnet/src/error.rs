use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("insufficient input: {0}")]
    InsufficientInput(String),

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found}, reader supports version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
