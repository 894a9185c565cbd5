use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),

    #[error("label {label} out of range for class_count {class_count}")]
    InvalidLabel { label: u32, class_count: usize },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("vector {id} has zero norm")]
    ZeroNorm { id: String },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: vector {id} has dimension {found}, expected {expected}")]
    InconsistentDim {
        line: usize,
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("id {0} not found")]
    MissingId(String),

    #[error("reverse segmentation failed for reference {reference}: {source}")]
    Segmenter {
        reference: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
