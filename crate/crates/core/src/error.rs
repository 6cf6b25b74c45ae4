//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; names the offending field.
    #[error("invalid configuration: {field}: {msg}")]
    Config { field: String, msg: String },

    /// Tensor or image shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Timestep ordering violated (e.g. a reverse step with t_prev >= t).
    #[error("timestep ordering: {0}")]
    Ordering(String),

    /// Prompt id not present in the registry.
    #[error("conditioning: unregistered prompt {0:?}")]
    UnregisteredPrompt(String),

    /// Non-finite or otherwise numerically invalid value.
    #[error("numeric: {0}")]
    Numeric(String),

    /// The aperture isolation pipeline found no usable foreground.
    #[error("no aperture found")]
    NoAperture,

    /// Input degenerate for the requested operation (e.g. zero variance for PCA).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Checkpoint archive malformed or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
