use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("infinite divergence: q[{index}] = 0 where p[{index}] = {p}")]
    InfiniteDivergence { index: usize, p: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid stream protocol: {0}")]
    Protocol(String),
    #[error("{path}: row {row}, column '{column}': {message}")]
    CsvParse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("herding selection needs at least one example")]
    EmptySelection,
    #[error("class {0} is already stored in exemplar memory")]
    ClassCollision(usize),
    #[error("class {0} has a degenerate (zero-norm) exemplar mean")]
    DegenerateMean(usize),
    #[error("class {0} has no exemplars in memory")]
    MissingClass(usize),

    #[error("incremental phase requires a previous model")]
    MissingPreviousModel,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite {term} loss{at}")]
    NonFiniteLoss { term: &'static str, at: String },

    #[error("empty test set")]
    EmptyTestSet,
    #[error("accuracy matrix: {0}")]
    Matrix(String),

    #[error("config field '{field}': {message}")]
    Config { field: String, message: String },
    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("summary: {0}")]
    Summary(String),
    #[error("output directory {0} already exists (use force to overwrite)")]
    OutputExists(PathBuf),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
