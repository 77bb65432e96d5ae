use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: validation failed: {msg}")]
    Validation { line: usize, msg: String },

    #[error("no {0} runs to build a frontier from")]
    EmptyFrontier(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("no crossover in bracket: gap at low end {gap_lo:.6e}, at high end {gap_hi:.6e}")]
    NoCrossover { gap_lo: f64, gap_hi: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("corruption retry budget exhausted after {0} attempts")]
    Corruption(usize),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
