use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid surface spec: {0}")]
    InvalidSpec(String),

    #[error("position {x} mm outside profile [0, {length}] mm")]
    OutOfRange { x: f64, length: f64 },

    #[error("contact patch [{lo:.4}, {hi:.4}] mm not within surface [0, {length:.4}] mm")]
    PatchOutsideSurface { lo: f64, hi: f64, length: f64 },

    #[error("invalid scan: {0}")]
    InvalidScan(String),

    #[error("integration diverged at t = {t} s")]
    Diverged { t: f64 },

    #[error("sensor at {distance_mm:.4} mm from magnet center (minimum 0.5 mm)")]
    SingularPosition { distance_mm: f64 },

    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotonicTimes { index: usize },

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("series too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("smoothing factor {0} outside (0, 1]")]
    InvalidAlpha(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("feature layout mismatch: expected {expected}, got {got}")]
    SchemaMismatch { expected: String, got: String },

    #[error("class {label} has {count} members, fewer than {folds} folds")]
    ClassTooSmall { label: usize, count: usize, folds: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid statistics input: {0}")]
    InvalidStats(String),

    #[error("{bad} of {total} data lines malformed (first at lines {lines:?})")]
    MalformedLog {
        bad: usize,
        total: usize,
        lines: Vec<usize>,
    },

    #[error("no contact detected")]
    NoContact,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command line tool: 2 config, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidSpec(_) | Error::InvalidScan(_) => 2,
            Error::Diverged { .. } | Error::SingularPosition { .. } => 4,
            _ => 3,
        }
    }
}
