use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("row {row} has zero norm")]
    DegenerateRow { row: usize },

    #[error("prediction row is not a probability distribution (sum {sum})")]
    InvalidDistribution { sum: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: bad magic bytes", .0.display())]
    BadMagic(PathBuf),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("{}: truncated payload (expected {expected} bytes, found {found})", .path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{}: non-finite value at index {index}", .path.display())]
    NonFinite { path: PathBuf, index: usize },

    #[error("bag {bag}: declares {declared} rows but embedding file holds {actual}")]
    RowCountMismatch {
        bag: String,
        declared: usize,
        actual: usize,
    },

    #[error("bag {bag}: embedding dimension {actual} does not match dataset dimension {expected}")]
    DimensionMismatch {
        bag: String,
        expected: usize,
        actual: usize,
    },

    #[error("bag {bag}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        bag: String,
        label: usize,
        num_classes: usize,
    },

    #[error("bag {bag}: instance range overlaps another bag")]
    OverlappingRanges { bag: String },

    #[error("class {class}: only {available} bags available, {requested} requested")]
    InsufficientBags {
        class: String,
        available: usize,
        requested: usize,
    },

    #[error("k-means: k={k} exceeds number of points {points}")]
    TooManyClusters { k: usize, points: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("embedding dimension conflict: instances have d={instances}, prompt features have d={prompts}")]
    DimConflict { instances: usize, prompts: usize },

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("prior mode mismatch: checkpoint is {found}, expected {expected}")]
    ModeMismatch { expected: String, found: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::DegenerateRow { .. } => "degenerate-row",
            Error::InvalidDistribution { .. } => "invalid-distribution",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::MissingFile(_) => "missing-file",
            Error::BadMagic(_) => "bad-magic",
            Error::UnsupportedVersion(_) => "version-mismatch",
            Error::Truncated { .. } => "truncated",
            Error::NonFinite { .. } => "non-finite",
            Error::RowCountMismatch { .. } => "dimension-mismatch",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::LabelOutOfRange { .. } => "label-range",
            Error::OverlappingRanges { .. } => "overlapping-ranges",
            Error::InsufficientBags { .. } => "insufficient-bags",
            Error::TooManyClusters { .. } => "too-many-clusters",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::DimConflict { .. } => "dim-conflict",
            Error::Unknown { .. } => "unknown",
            Error::CorruptCheckpoint(_) => "corrupt-container",
            Error::ModeMismatch { .. } => "mode-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn open(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}
