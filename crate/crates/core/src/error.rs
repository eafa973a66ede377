use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("unsupported kernel size {0}: only odd sizes are supported")]
    UnsupportedKernel(usize),
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("every token is ignored; loss is empty")]
    EmptyLoss,
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("gradient oracle invalid: objective is not deterministic ({0})")]
    OracleInvalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that stem from numerics (NaN, failed gradient checks).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::OracleInvalid(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format { .. })
    }
}
