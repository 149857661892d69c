use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the forecasting pipeline.
///
/// Variants are grouped by the exit-code class the CLI maps them to:
/// data problems, configuration problems and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("gap error: non-uniform spacing at row(s) {indices:?} (expected {step_minutes} min): {detail}")]
    Gap {
        indices: Vec<usize>,
        step_minutes: i64,
        detail: String,
    },

    #[error("data error at row {row}: {msg}")]
    DataRow { row: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate range: min == max == {0}")]
    DegenerateRange(f64),

    #[error("insufficient data: need {needed} points, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("division by zero: y[{index}] == 0 in MAPE")]
    ZeroActual { index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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

    /// Process exit code for this error class: 2 data, 3 config, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Gap { .. }
            | Error::DataRow { .. }
            | Error::Data(_)
            | Error::DegenerateRange(_)
            | Error::InsufficientData { .. }
            | Error::ZeroActual { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. } => 2,
            Error::Config(_) | Error::Index(_) | Error::Shape(_) | Error::State(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
