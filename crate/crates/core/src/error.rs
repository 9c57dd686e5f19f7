use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {what} at pixel ({row}, {col})")]
    NonFinitePixel { what: &'static str, row: usize, col: usize },

    #[error("non-finite loss term {0}")]
    NonFiniteLoss(&'static str),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("failed to decode {field}: {reason}")]
    Decode { field: &'static str, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing path {0}")]
    MissingPath(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short stable name of the variant, used in machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Dimension(_) => "dimension",
            Error::NonFinitePixel { .. } => "non_finite_pixel",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Diverged { .. } => "diverged",
            Error::Decode { .. } => "decode",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Empty(_) => "empty",
            Error::MissingPath(_) => "missing_path",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
