use std::io;

use thiserror::Error;

use crate::tensor::ovtf::OvtfError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("tensor file: {0}")]
    Ovtf(#[from] OvtfError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint incompatible with model: {0}")]
    Checkpoint(String),
    #[error("fixture mismatch: {0}")]
    Fixture(String),
    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
