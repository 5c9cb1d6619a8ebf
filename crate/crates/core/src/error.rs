use crate::tensor::Shape;

/// Errors surfaced by the library.
///
/// The variants are grouped by the caller's likely reaction: configuration
/// problems are fixed by editing the run setup, data problems by regenerating
/// or repairing files on disk.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// True for errors describing the run configuration rather than files.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::ShapeMismatch { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
