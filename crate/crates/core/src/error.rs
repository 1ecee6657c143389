use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HdError>;

#[derive(Debug, Error)]
pub enum HdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint config mismatch on `{field}`: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vertex cap exceeded: {height}x{width} = {count} vertices after pooling, cap {cap}")]
    VertexCap {
        height: usize,
        width: usize,
        count: usize,
        cap: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("unknown image id `{0}` in predictions")]
    UnknownImage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

impl HdError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        HdError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdError::Io {
            path: path.into(),
            source,
        }
    }
}
