//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed archive: missing field `{0}`")]
    MissingField(String),

    #[error("invalid model data: {0}")]
    InvalidModelData(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("resolution mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    ResolutionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },

    #[error("bad config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint version {found} not supported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 bad config, 3 asset error,
    /// 4 adapter error, 5 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Adapter(_) => 4,
            Error::Numeric(_) => 5,
            _ => 3,
        }
    }
}
