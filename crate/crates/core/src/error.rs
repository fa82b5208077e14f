use thiserror::Error;

pub type Result<T, E = RegoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RegoError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate embedding for `{0}`: zero norm, cannot normalize")]
    DegenerateEmbedding(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl RegoError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RegoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            RegoError::Io { .. } | RegoError::Image(_) | RegoError::Json(_) => 3,
            RegoError::Checkpoint(_) => 3,
            _ => 4,
        }
    }
}
