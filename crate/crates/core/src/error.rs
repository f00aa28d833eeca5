use thiserror::Error;

/// Errors produced by the estimation, spectral and bootstrap routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("parameter outside the domain: {0}")]
    ParameterDomain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("path overflow at t = {t}: volatility recursion produced a non-finite value")]
    PathOverflow { t: usize },

    #[error("non-finite value while {0}")]
    NonFinite(String),

    #[error("{0} is not supported for this model family")]
    Unsupported(String),

    #[error("Kronecker dimension {dim} exceeds the cap of {cap}")]
    DimensionOverflow { dim: usize, cap: usize },

    #[error("spectral iteration did not converge: {0}")]
    SpectralNonConvergence(String),

    #[error("degenerate parameter directions: {0}")]
    Degenerate(String),

    #[error("constrained set is empty: {0}")]
    Infeasible(String),

    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),

    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
