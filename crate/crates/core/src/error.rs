use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("column '{column}' has zero variance")]
    ZeroVariance { column: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("column '{column}' has no value on its first date {date}")]
    LeadingGap { column: String, date: NaiveDate },

    #[error("insufficient history: {missing} more rows needed before {first_target}")]
    Warmup {
        missing: usize,
        first_target: NaiveDate,
    },

    #[error("stability error: {0}")]
    Stability(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
