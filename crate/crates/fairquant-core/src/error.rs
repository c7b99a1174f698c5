//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape inconsistency, with the offending layer when known.
    #[error("shape mismatch{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    ShapeMismatch { layer: Option<usize>, msg: String },

    /// Invalid configuration value (bad palette, negative multiplier, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss or parameter.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Requested data is missing or inconsistent (empty dataset, bad label, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(layer: impl Into<Option<usize>>, msg: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
