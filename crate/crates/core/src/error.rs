use std::path::PathBuf;

/// Errors raised across the framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid domain spec: {0}")]
    Spec(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("sample {id}: mask is missing")]
    MissingMask { id: String },

    #[error("sample {id}: mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },

    #[error("labels are not visible for this dataset (requested sample {id})")]
    LabelsHidden { id: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature extractor: {0}")]
    Extractor(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable tag used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Spec(_) => "spec",
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
            Error::MissingMask { .. } => "missing-mask",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::LabelsHidden { .. } => "labels-hidden",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Extractor(_) => "extractor",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
