use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("zero response at row {index}: the log-Jacobian is undefined")]
    ZeroResponse { index: usize },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("state does not match model {model}: {reason}")]
    StateMismatch { model: &'static str, reason: String },

    #[error("sampler diverged at iteration {iteration} in block {block}")]
    Divergence { iteration: usize, block: String },

    #[error("{solver} did not converge after {iterations} iterations (gap {gap:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        gap: f64,
    },

    #[error("quadrature did not reach tolerance: achieved {achieved:e}, wanted {wanted:e}")]
    Quadrature { achieved: f64, wanted: f64 },

    #[error("empty chain")]
    EmptyChain,

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("ill-posed scenario: {0}")]
    Scenario(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
