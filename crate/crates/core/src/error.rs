use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum BidoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error(
        "training diverged: non-finite objective at epoch {epoch}, batch {batch} \
         (lambda_x = {lambda_x:?}, lambda_y = {lambda_y:?})"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        lambda_x: f64,
        lambda_y: f64,
    },

    #[error("attack aborted: {0}")]
    Attack(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = BidoError> = std::result::Result<T, E>;

impl BidoError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        BidoError::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        BidoError::Parameter(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        BidoError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
