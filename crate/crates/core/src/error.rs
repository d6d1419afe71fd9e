use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{what}: row {row} sums to {sum}, expected 1")]
    NotAProbability {
        what: &'static str,
        row: usize,
        sum: f32,
    },

    #[error("node {0} is not part of this trace")]
    UnknownNode(usize),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage} produced a non-finite value at iteration {iteration}")]
    Diverged {
        stage: &'static str,
        iteration: usize,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("missing momentum target for example {index} at epoch {epoch}")]
    MissingTarget { index: usize, epoch: usize },

    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint parameter {index} has shape {found:?}, spec expects {expected:?}")]
    CheckpointShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed model descriptor: {0}")]
    Descriptor(String),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("unexpected IDX dimensions: {0}")]
    IdxDimensions(String),

    #[error("epsilon grids differ at position {position}")]
    GridMismatch { position: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
