use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("taper scale factor vanishes; the inverse taper is undefined")]
    DegenerateTaper,
    #[error("invalid superquadric parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("abstraction has no components")]
    EmptyAbstraction,
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("occupancy grids differ in frame or resolution")]
    GridMismatch,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unknown point cloud format")]
    UnknownFormat { path: PathBuf },
    #[error("{path}: malformed record at line {line}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: point cloud is empty")]
    EmptyCloud { path: PathBuf },
    #[error("{path}: unsupported version {found:?} (expected {expected:?})")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}
