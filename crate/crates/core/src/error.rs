//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Strong-stability certification failed; names the first violated bound.
    #[error("strong-stability certification failed: {0}")]
    CertificationFailed(String),

    /// The closed loop cannot be certified for any gamma > 0.
    #[error("spectral radius of A - B K is {rho:.6} >= 1; not certifiable")]
    UnstableClosedLoop { rho: f64 },

    #[error("memory length H = {h} is below the stability threshold {min_h}")]
    HorizonTooShort { h: usize, min_h: usize },

    /// The polytope has no (strictly) feasible point. `max_slack` is the
    /// optimum of the phase-one LP.
    #[error("constraint set is empty: best uniform slack {max_slack:.3e}{condition}")]
    InfeasibleSet { max_slack: f64, condition: String },

    #[error("degenerate constraint data: {0}")]
    DegenerateConstraints(String),

    /// Solver stopped before reaching its tolerances.
    #[error(
        "solver did not converge after {iterations} iterations \
         (primal residual {primal:.3e}, dual residual {dual:.3e})"
    )]
    SolverFailure {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
