use std::path::PathBuf;

/// Errors surfaced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path} at byte offset {offset}: {source}")]
    ManifestParse {
        path: PathBuf,
        offset: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("sample '{clip_id}' references missing file {path}")]
    MissingFile { clip_id: String, path: PathBuf },

    #[error("sample '{clip_id}' is malformed: {reason}")]
    BadSample { clip_id: String, reason: String },

    #[error("unknown clip id '{clip_id}'")]
    UnknownClip { clip_id: String },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training aborted at step {step} (lr {lr}): {reason}; batch {batch:?}")]
    Train {
        step: usize,
        lr: f64,
        reason: String,
        batch: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
