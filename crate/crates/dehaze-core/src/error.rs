//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported image format for {path}: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("pixel data contains NaN or infinite values")]
    NonFinitePixels,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing tensor {name} in weight archive")]
    MissingTensor { name: String },

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("archive is malformed: {0}")]
    MalformedArchive(String),

    #[error("digest mismatch for {path}: expected {expected}, got {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("network unavailable and no cached copy for {url}")]
    NetworkUnavailable { url: String },

    #[error("download of {url} failed: {detail}")]
    DownloadFailed { url: String, detail: String },

    #[error("empty dataset under {root}")]
    EmptyDataset { root: PathBuf },

    #[error("pair {stem}: hazy is {hazy:?} but clear is {clear:?}")]
    PairDimensionMismatch {
        stem: String,
        hazy: (usize, usize),
        clear: (usize, usize),
    },

    #[error("missing depth map for clear image {stem}")]
    MissingDepth { stem: String },

    #[error("normalization layer has no accumulated batch statistics (run training first)")]
    NoRunningStats,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
