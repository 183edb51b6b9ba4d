use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor file: {0}")]
    NotATensor(PathBuf),
    #[error("truncated tensor: {path} (expected {expected} payload bytes, found {found})")]
    TruncatedTensor {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("split leak: concept {0} appears in both train and test")]
    SplitLeak(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("epoch out of bounds: onset {onset} needs [{pre} before, {post} after] within {len} samples")]
    EpochOutOfBounds {
        onset: usize,
        pre: usize,
        post: usize,
        len: usize,
    },
    #[error("bad decimation factor {factor} for {samples} samples")]
    BadDecimationFactor { factor: usize, samples: usize },
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("channel mismatch: operator has {operator} channels, data has {data}")]
    ChannelMismatch { operator: usize, data: usize },
    #[error("bad group size {group} for {repetitions} repetitions")]
    BadGroupSize { group: usize, repetitions: usize },
    #[error("invalid pooling mode {mode} for {topology} layer")]
    InvalidPoolingMode { mode: String, topology: String },
    #[error("layer not in feature set: {0}")]
    UnknownLayer(usize),
    #[error("nothing to fuse")]
    NothingToFuse,
    #[error("fusion dimension mismatch: {0}")]
    FusionDimensionMismatch(String),
    #[error("kernel longer than signal: kernel {kernel}, signal {signal}")]
    KernelTooLong { kernel: usize, signal: usize },
    #[error("degenerate embedding: projection has zero norm")]
    DegenerateEmbedding,
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("batch too large: {batch} exceeds {available} available concepts")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("bad image file: {0}")]
    BadImage(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
