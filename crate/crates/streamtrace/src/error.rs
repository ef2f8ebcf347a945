use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid streamline: {0}")]
    InvalidStreamline(String),

    #[error("degenerate streamline: total arc length is zero")]
    DegenerateStreamline,

    #[error("zero-length segment at point index {0}")]
    ZeroLengthSegment(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("streamline {index} contains non-finite coordinates")]
    NonFiniteStreamline { index: usize },

    #[error("streamline length mismatch: {left} vs {right} points")]
    LengthMismatch { left: usize, right: usize },

    #[error("sample size {requested} exceeds tractogram size {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("seed sidecar has {seeds} entries but tractogram has {streamlines} streamlines")]
    SeedCountMismatch { seeds: usize, streamlines: usize },

    #[error("{path}: bad magic (not a {format} file)")]
    BadMagic { path: PathBuf, format: &'static str },

    #[error("{path}: unsupported datatype {datatype}")]
    UnsupportedDatatype { path: PathBuf, datatype: String },

    #[error("{path}: truncated data section (expected {expected} bytes, got {actual})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: checksum mismatch (stored {stored:#x}, computed {computed:#x})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("missing tensor {name:?}")]
    MissingTensor { name: String },

    #[error("unknown tensor {name:?}")]
    UnknownTensor { name: String },

    #[error("tensor {name:?} has shape {actual:?}, expected {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch normalization requires a batch of at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("empty mask: no valid positions")]
    EmptyMask,

    #[error("all results are outliers: mean/median undefined for subject {0}")]
    UndefinedStats(String),

    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },

    #[error("no streamline accepted over {0} consecutive batches; configuration is degenerate")]
    DegenerateTracking(usize),

    #[error("invalid phantom geometry: {0}")]
    InvalidPhantom(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
