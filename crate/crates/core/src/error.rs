use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid render config: {0}")]
    InvalidRenderConfig(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty reference set")]
    EmptyReferenceSet,

    #[error("zero-norm style layer {0}")]
    ZeroNormLayer(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        trace: Box<crate::inversion::Trace>,
    },

    #[error("checksum mismatch for {entry}: expected {expected}, found {found}")]
    ChecksumMismatch {
        entry: String,
        expected: String,
        found: String,
    },

    #[error("unsupported manifest version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("image encode error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
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
