//! Error types shared by every module.

use std::path::PathBuf;

use thiserror::Error;

use crate::metrics::MetricError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which prediction set a metric failed on when comparing a black-box with
/// its surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Blackbox,
    Surrogate,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Blackbox => f.write_str("black-box"),
            Side::Surrogate => f.write_str("surrogate"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: group value {value} is not 0 or 1")]
    InvalidGroupValue { row: usize, value: f64 },
    #[error("group value {value} is not 0 or 1")]
    NonBinaryGroup { value: f64 },
    #[error("row {row}: label value {value} is not 0 or 1")]
    InvalidLabelValue { row: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {needed} rows, dataset has {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("train fraction {fraction} on {n_rows} rows leaves an empty split")]
    DegenerateSplit { fraction: f64, n_rows: usize },
    #[error("dataset has no label column")]
    MissingLabels,
    #[error("labels contain a single class; need at least 2 rows of each class")]
    SingleClass,
    #[error("malformed model file at line {line}: {message}")]
    ModelFormat { line: usize, message: String },
    #[error("unsupported model file version {found:?}")]
    ModelVersion { found: String },
    #[error("model variant mismatch: expected {expected}, found {found}")]
    ModelVariant { expected: String, found: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("metric undefined on {side} predictions: {source}")]
    SideMetric {
        side: Side,
        #[source]
        source: MetricError,
    },
    #[error("weighted least squares is rank-deficient beyond ridge rescue")]
    RankDeficient,
    #[error("no neighborhood with both groups after {attempts} attempts")]
    SingleGroupNeighborhood { attempts: usize },
    #[error("optimization diverged (non-finite objective) in restart {restart}")]
    Divergence { restart: usize },
    #[error("surrogate weight on feature {feature} is zero; boundary undefined")]
    ZeroWeight { feature: usize },
    #[error("grid oracle supports at most 2 active features, got {got}")]
    ActiveSetTooLarge { got: usize },
    #[error("unsupported report format `{0}`")]
    UnsupportedFormat(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool: 1 for usage errors,
    /// 2 for data or undefined-metric errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::UnsupportedFormat(_) => 1,
            Error::RankDeficient | Error::Divergence { .. } | Error::ZeroWeight { .. } => 3,
            _ => 2,
        }
    }
}
