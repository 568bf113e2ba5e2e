use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("operation `{0}` has no registered adjoint")]
    UnsupportedOp(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("manifest error: missing mask for {}", .0.display())]
    MissingMask(PathBuf),

    #[error("training diverged at iteration {iteration} (lr {lr:e}, grad norm {grad_norm:e}): {reason}")]
    Diverged {
        iteration: usize,
        lr: f64,
        grad_norm: f64,
        reason: String,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }
}
