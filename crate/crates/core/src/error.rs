use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: malformed sidecar: {reason}")]
    Sidecar { path: PathBuf, reason: String },

    #[error("{path}: invalid NIfTI file: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("shape mismatch: {what} ({expected:?} vs {found:?})")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("label value {value} at voxel {index} is outside {{0,1,2}}")]
    InvalidLabel { value: u8, index: usize },

    #[error("invalid spacing {0:?}: components must be finite and positive")]
    InvalidSpacing([f64; 3]),

    #[error("patch dims {dims:?} are not divisible by {divisor}")]
    Divisibility { dims: Vec<usize>, divisor: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("training set contains no foreground voxels")]
    NoForeground,

    #[error("{0}")]
    InvalidInput(String),

    #[error("non-finite loss {value} at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        value: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
