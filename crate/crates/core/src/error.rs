use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape {lhs:?} is incompatible with {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("conv2d: input {input:?} has {} channels but weight {weight:?} expects {}", input.first().copied().unwrap_or(0), weight.get(1).copied().unwrap_or(0))]
    ChannelMismatch {
        input: Vec<usize>,
        weight: Vec<usize>,
    },

    #[error("{op}: rate {rate} does not divide spatial size {height}x{width}")]
    NotDivisible {
        op: &'static str,
        rate: usize,
        height: usize,
        width: usize,
    },

    #[error("concat_channels: input {index} has spatial size {found:?}, expected {expected:?}")]
    SpatialMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error(
        "input size {height}x{width} is not a multiple of {multiple} (backbone stride contract)"
    )]
    InputSize {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("pyramid level {level}: expected {expected} channels, found {found}")]
    LevelChannels {
        level: usize,
        expected: usize,
        found: usize,
    },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("top-down fusion needs at least one level")]
    EmptyLevels,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: decode error at byte {offset}: {message}")]
    Decode {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
