use std::path::PathBuf;

use thiserror::Error;
use vb_tensor::TensorError;

/// Rejection reasons for VBV/VBM files.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("header truncated")]
    TruncatedHeader,
    #[error("dimensions {0:?} overflow the addressable size")]
    DimensionOverflow([u32; 3]),
    #[error("zero dimension in {0:?}")]
    ZeroDimension([u32; 3]),
    #[error("non-positive spacing {0:?}")]
    BadSpacing([f32; 3]),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite voxel at index {0}")]
    NonFinite(usize),
    #[error("mask value {value} at index {index} is not 0 or 1")]
    InvalidMaskValue { index: usize, value: u8 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error("invalid input to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("config [{section}] {key}: {detail}")]
    Config {
        section: &'static str,
        key: &'static str,
        detail: String,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("no voxel lies above the brain threshold")]
    EmptyThreshold,

    #[error("non-positive intensity {value} inside the mask at voxel {index}")]
    NonPositiveVoxel { index: usize, value: f32 },

    #[error("bias fit is rank deficient: {mask_voxels} mask voxels for {terms} polynomial terms")]
    RankDeficient { mask_voxels: usize, terms: usize },

    #[error("localization failed: prior never exceeds tau_pos = {tau_pos}")]
    LocalizationFailed { tau_pos: f64 },

    #[error("slice {slice_index}: {detail}")]
    Oracle { slice_index: usize, detail: String },

    #[error("training diverged at epoch {epoch} (loss {loss}); config: {config}")]
    Diverged { epoch: usize, loss: f64, config: String },

    #[error("missing artifact {path}; run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("json {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
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

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
