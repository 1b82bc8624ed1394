use thiserror::Error;

/// Errors raised by the solvers and their inputs.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value in {context} at node {index}")]
    NonFinite { context: String, index: usize },

    #[error("negative density {value:e} at node {index} (time index {time_index:?})")]
    Negativity {
        index: usize,
        value: f64,
        time_index: Option<usize>,
    },

    #[error("iteration did not converge after {} iterates (last residual {:e})", residuals.len(), residuals.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { residuals: Vec<f64> },

    #[error("flow left the admissible box [{lo}, {hi}] at time {time} (start {start})")]
    FlowExit {
        start: f64,
        time: f64,
        lo: f64,
        hi: f64,
    },

    #[error("mass {outside:e} left the truncated domain at time index {time_index}")]
    DomainLeak { outside: f64, time_index: usize },

    #[error("Mittag-Leffler series overflowed at z = {0}")]
    Overflow(f64),

    #[error("potential term is positive ({value:e}) at x = {x}")]
    PositivePotential { x: f64, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
