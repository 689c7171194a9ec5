use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("division by zero for nutrient `{nutrient}`")]
    Division { nutrient: String },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("missing image for dish `{dish_id}`: {path}")]
    MissingImage { dish_id: String, path: PathBuf },

    #[error("split integrity: {0}")]
    Integrity(String),

    #[error("checkpoint incompatible with config; differing fields: {}", fields.join(", "))]
    Incompatible { fields: Vec<String> },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input (flags, configs, checkpoints)
    /// rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Incompatible { .. } | Error::Checkpoint(_)
        )
    }
}
