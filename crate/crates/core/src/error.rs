use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
///
/// Every variant has a stable short [`code`](Error::code) used by the CLI
/// when it emits machine-readable errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("dataset `{0}` has no usable pairs")]
    EmptyDataset(String),

    #[error("training diverged: {skipped} of {total} pairs in epoch {epoch} had non-finite loss")]
    Divergence { epoch: usize, skipped: usize, total: usize },

    #[error("landmark count mismatch: {fixed} fixed vs {moving} moving")]
    LandmarkCount { fixed: usize, moving: usize },

    #[error("not a single-file NIfTI-1 image: {0}")]
    NotNifti(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDtype(i16),

    #[error("image is not 3D: {0}")]
    Not3d(String),

    #[error("oblique orientation unsupported: {0}")]
    ObliqueUnsupported(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidVolume(_) => "invalid-volume",
            Error::TapeConsumed => "tape-consumed",
            Error::NonFiniteGrad(_) => "nonfinite-grad",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Divergence { .. } => "divergence",
            Error::LandmarkCount { .. } => "landmark-count",
            Error::NotNifti(_) => "not-nifti",
            Error::UnsupportedDtype(_) => "unsupported-dtype",
            Error::Not3d(_) => "not-3d",
            Error::ObliqueUnsupported(_) => "oblique-unsupported",
            Error::MissingFile(_) => "missing-file",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
