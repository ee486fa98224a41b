use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} outside grid range [{t0}, {t1}]")]
    OutOfRange { t: f64, t0: f64, t1: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite ODE right-hand side at t = {t} (blow-up before the initial time)")]
    OdeBlowUp { t: f64 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("risk-sensitivity parameter must be nonzero; use the plain mean for mu = 0")]
    ZeroMu,

    #[error("empty sample")]
    EmptySample,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
