use std::path::PathBuf;

use dehaze_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DehazeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid {name}: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data at byte {offset}: {reason}")]
    Format {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at update {update}: {reason}")]
    Diverged { update: u64, reason: String },

    #[error("config: {0}")]
    Config(String),
}

impl DehazeError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        DehazeError::Param {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DehazeError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DehazeError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DehazeError> = std::result::Result<T, E>;
