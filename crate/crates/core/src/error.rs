//! Error type shared by every module.

use thiserror::Error;

/// Failures reported by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("singular {what} (condition estimate {condition:e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("matrix exponential overflow (scaled norm {norm:e})")]
    Overflow { norm: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("not stabilizable")]
    NotStabilizable,

    #[error("not detectable")]
    NotDetectable,

    #[error("unstable closed loop")]
    UnstableClosedLoop,

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("closed-loop blow-up in trajectory {trajectory}")]
    BlowUp { trajectory: usize },

    #[error("batch too short: order {order} needs {needed} states per trajectory, found {found}")]
    BatchTooShort { order: usize, needed: usize, found: usize },

    #[error("step size too large")]
    StepSizeTooLarge,

    #[error("non-concave q in action")]
    NonConcave,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by a malformed or inadmissible configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => true,
            Error::AtIteration { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
