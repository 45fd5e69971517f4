use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the forecasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("period {period} exceeds series length {len}")]
    PeriodTooLarge { period: usize, len: usize },
    #[error("no dominant period in [{min_p}, {max_p}]")]
    NoDominantPeriod { min_p: usize, max_p: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("every patch is masked; at least one visible patch is required")]
    AllMasked,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("non-numeric cell {value:?} at row {row}, column {column}")]
    NonNumericCell {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint does not match the configured model: {0}")]
    ConfigMismatch(String),
    #[error("loss diverged during {stage} at epoch {epoch}: {loss}")]
    DivergedLoss {
        stage: String,
        epoch: usize,
        loss: f64,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ConfigMismatch(_) | Error::Parse { .. } | Error::NonNumericCell { .. }
        )
    }
}
