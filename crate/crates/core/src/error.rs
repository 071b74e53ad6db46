use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-monotone timestamps at line {line}")]
    NonMonotoneTimestamps { line: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("band {lo}-{hi} Hz outside (0, {nyquist}) Hz")]
    BandOutsideNyquist { lo: f64, hi: f64, nyquist: f64 },

    #[error("segment of {len} samples shorter than required {required}")]
    SegmentTooShort { len: usize, required: usize },

    #[error("no peaks found")]
    NoPeaks,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("onset missing for patient {0}")]
    OnsetMissing(String),

    #[error("empty selection: every feature was dropped")]
    EmptySelection,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("fewer patients ({patients}) than folds ({folds})")]
    FewerPatientsThanFolds { patients: usize, folds: usize },

    #[error("{features} features exceed the exact enumeration limit of {limit}; explain a subset of features")]
    TooManyFeatures { features: usize, limit: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
