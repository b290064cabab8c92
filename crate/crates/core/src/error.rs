use std::fmt;

use thiserror::Error;

/// Row-major matrix shape as `(rows, cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Validation { row: Option<usize>, message: String },

    #[error("insufficient data for class {class}: need {needed} records, found {found}")]
    InsufficientData {
        class: String,
        needed: usize,
        found: usize,
    },

    #[error("insufficient background records: requested {requested}, available {available}")]
    InsufficientBackground { requested: usize, available: usize },

    #[error("shape error in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}")]
    Training {
        epoch: usize,
        last_log: Box<crate::finetune::TrainLog>,
    },

    #[error("gradient check error: {0}")]
    Check(String),
}

impl Error {
    pub(crate) fn validation(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            row,
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
