use std::path::PathBuf;

use thiserror::Error;

/// Unified error type for the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("invalid raster: {0}")]
    Raster(String),

    #[error("backbone {name}: {detail}")]
    Backbone { name: String, detail: String },

    #[error("graph: {0}")]
    Graph(String),

    #[error("onnx decode: {0}")]
    OnnxDecode(String),

    #[error("feature extraction: {0}")]
    Feature(String),

    #[error("classifier: {0}")]
    Classifier(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Validation(String),

    #[error("missing features: first absent cache key {key} (image {image_id}, spec {spec}); run `evkit extract` first")]
    MissingFeatures {
        key: String,
        image_id: String,
        spec: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Manifest { .. } | Error::Validation(_) => 1,
            _ => 2,
        }
    }
}
