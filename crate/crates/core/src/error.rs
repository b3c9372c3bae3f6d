use thiserror::Error;

/// Errors raised by model construction, solvers and the batch runner.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The nonlinear backward integration produced a non-finite value.
    #[error("integration diverged at t = {time} (grid index {index}, state {state})")]
    Divergence { time: f64, index: usize, state: usize },

    /// An inner Picard solve of the truncation cascade did not converge.
    #[error("cascade failure at radius {radius}, subinterval {subinterval}: {reason}")]
    Cascade {
        radius: f64,
        subinterval: usize,
        reason: String,
    },

    /// A failure inside one run of a multi-run experiment.
    #[error("run {index}: {source}")]
    Run {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A configuration file or flag is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
