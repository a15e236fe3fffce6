use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("path not found or unreadable: {0}")]
    Path(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("need at least {needed} identities, found {found}")]
    InsufficientIdentities { needed: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("role violation: {0}")]
    RoleViolation(String),

    #[error("unknown architecture `{0}` (expected small-cnn, residual-50 or osnet-like)")]
    Registry(String),

    #[error("cannot load weights from {path}: {reason}")]
    WeightsLoad { path: PathBuf, reason: String },

    #[error("targeted mode requires a target input")]
    MissingTarget,

    #[error("placement out of bounds: {0}")]
    Placement(String),

    #[error("undefined query: {0}")]
    UndefinedQuery(String),

    #[error("attack success rate needs at least one trial")]
    EmptyTrials,

    #[error("rank error: need more samples ({samples}) than components ({components})")]
    Rank { samples: usize, components: usize },

    #[error("dependency unavailable: {0}")]
    Dependency(String),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors that the CLI reports with the configuration exit code.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Path(_))
    }
}
