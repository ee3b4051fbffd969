use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("unknown node `{name}` at line {line}")]
    UnknownNode { line: u64, name: String },

    #[error("timestamp {timestamp} at line {line} is earlier than its predecessor {previous}")]
    NonMonotonicTimestamp { line: u64, timestamp: f64, previous: f64 },

    #[error("node {node} is not an endpoint of event {origin}->{destination}")]
    NodeNotEndpoint { node: usize, origin: usize, destination: usize },

    #[error("update time {t} precedes last update {last}")]
    TimeRegression { t: f64, last: f64 },

    #[error("normalizer {value} of node {node} is not positive")]
    DegenerateNormalizer { node: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: &'static str, expected: String, actual: String },

    #[error("shape error in {op}: {detail}")]
    ShapeError { op: &'static str, detail: String },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("backward was already run on this tape")]
    BackwardTwice,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("training split contains no prediction windows")]
    EmptyTrainSplit,

    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("unseen time-of-day slot {slot}")]
    UnseenSlot { slot: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("checkpoint array `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: (usize, usize), expected: (usize, usize) },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short class name printed by the command line on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::UnknownNode { .. } => "UnknownNode",
            Error::NonMonotonicTimestamp { .. } => "NonMonotonicTimestamp",
            Error::NodeNotEndpoint { .. } => "NodeNotEndpoint",
            Error::TimeRegression { .. } => "TimeRegression",
            Error::DegenerateNormalizer { .. } => "DegenerateNormalizer",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeError { .. } => "ShapeError",
            Error::NotScalar { .. } => "NotScalar",
            Error::BackwardTwice => "BackwardTwice",
            Error::NonFinite { .. } => "NonFinite",
            Error::CheckFailed(_) => "CheckFailed",
            Error::EmptyTrainSplit => "EmptyTrainSplit",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::UnseenSlot { .. } => "UnseenSlot",
            Error::Io { .. } => "IoError",
            Error::BadMagic => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
