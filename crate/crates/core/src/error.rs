use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("model `{model}`: {message}")]
    InvalidModel { model: String, message: String },

    #[error("invalid class accuracy matrix: {0}")]
    InvalidMatrix(String),

    #[error("cannot renormalize class accuracies for model `{model}` (top1 {top1}) with spread {spread}")]
    InfeasibleRenormalization { model: String, top1: f64, spread: f64 },

    #[error("no model satisfies latency target {latency_ms} ms")]
    SelectionInfeasible { latency_ms: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("time regression: t = {t} after {last}")]
    TimeRegression { t: f64, last: f64 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown model id {0}")]
    UnknownModel(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        line: usize,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration or input files.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidModel { .. }
                | Error::InvalidMatrix(_)
                | Error::InfeasibleRenormalization { .. }
                | Error::Config { .. }
                | Error::UnknownModel(_)
                | Error::TimeRegression { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::EmptyInput(_)
        )
    }
}
