use thiserror::Error;

use crate::dsl::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("field length mismatch: {left} vs {right} modes")]
    BasisMismatch { left: usize, right: usize },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("evaluation of `{expr}` failed at grid point {index} (x = {x}): {source}")]
    GridEval {
        expr: String,
        index: usize,
        x: f64,
        #[source]
        source: EvalError,
    },

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("step size {h} exceeds stability limit {limit} (rho = {rho}, eps = {eps})")]
    StepSize { h: f64, limit: f64, rho: f64, eps: f64 },

    #[error("non-finite state in {component} at t = {t}")]
    BlowUp { component: &'static str, t: f64 },

    #[error("xi = {xi} is outside the tabulated range [{lo}, {hi}]")]
    OutsideHull { xi: f64, lo: f64, hi: f64 },

    #[error("trajectory has no recorded {0} increments")]
    MissingNoise(&'static str),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("all {0} replicas aborted")]
    AllAborted(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Failures that abort a single Monte Carlo replica rather than the run.
    pub fn is_replica_failure(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. } | Error::OutsideHull { .. } | Error::GridEval { .. } | Error::Eval(_)
        )
    }
}
