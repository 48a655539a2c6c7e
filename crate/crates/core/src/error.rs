use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HlfpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HlfpError {
    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("missing parameter tensor `{0}`")]
    MissingParameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed architecture file: {0}")]
    ArchFile(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl HlfpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HlfpError::Io {
            path: path.into(),
            source,
        }
    }
}
