use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// invalid input / config → 2, I/O → 3, missing prerequisite artifact → 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code this error maps to under the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::ShapeMismatch(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::MissingArtifact(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
