use std::path::PathBuf;

use kws_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KwsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("numeric error in bin {bin}: {msg}")]
    Numeric { bin: usize, msg: String },
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KwsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}

pub type Result<T, E = KwsError> = std::result::Result<T, E>;
