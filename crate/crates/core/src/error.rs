use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{solver} did not converge after {cycles} cycles (kkt violation {kkt_violation:.3e})")]
    NotConverged {
        solver: &'static str,
        cycles: usize,
        kkt_violation: f64,
        last_iterate: Vec<f64>,
    },

    #[error("quasi-separation detected: {0}")]
    Separation(String),

    #[error("rank deficient design: {0}")]
    Rank(String),

    #[error("degenerate penalty loading for column {column} ({value:.3e})")]
    DegenerateLoading { column: usize, value: f64 },

    #[error("degenerate instrument: {0}")]
    DegenerateInstrument(String),

    #[error("weak instrument: |E_n[w d z]| = {0:.3e}")]
    WeakInstrument(f64),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// Solver-side failures, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        !matches!(
            self,
            Error::Domain(_) | Error::InvalidData(_) | Error::Argument(_)
        )
    }
}
