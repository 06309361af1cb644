use std::path::PathBuf;

/// Errors raised anywhere in the counting and adaptation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed dataset at {}: {reason}", path.display())]
    MalformedDataset { path: PathBuf, reason: String },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedDataset {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
