use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: invalid geometry: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient in {context}")]
    NonFiniteGradient { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("gradient context already consumed by a backward pass")]
    GraphConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file ({reason})")]
    Truncated { path: PathBuf, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint {path}: corrupt length ({reason})")]
    CorruptLength { path: PathBuf, reason: String },

    #[error("checkpoint {path}: format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path}: config digest {found} does not match {expected}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("checkpoint stores {found}-bit values, expected {expected}-bit")]
    PrecisionMismatch { expected: u32, found: u32 },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("training diverged at epoch {epoch}: {reason} ({})", last_good_note(*.last_good))]
    Diverged {
        epoch: usize,
        reason: String,
        /// Completed epochs of the newest checkpoint written before the failure.
        last_good: Option<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// An I/O error that names the file it concerns.
    pub fn io_at(path: &Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}

fn last_good_note(last_good: Option<usize>) -> String {
    match last_good {
        Some(e) => format!("last good checkpoint after epoch {e}"),
        None => "no checkpoint written".into(),
    }
}
