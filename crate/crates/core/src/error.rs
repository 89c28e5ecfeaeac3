use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical breakdown: {0}")]
    Numerical(String),

    #[error("kernel dimension {found} does not match expected {expected}")]
    KernelDimension { expected: usize, found: usize },

    #[error("projection drift {drift:e} exceeds tolerance {tol:e}")]
    ProjectionDrift { drift: f64, tol: f64 },

    #[error("time step {dt:e} violates the CFL limit {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("history is empty or too short: {0}")]
    EmptyHistory(String),

    #[error("cache file: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for NaN / overflow style failures.
    pub fn is_blowup(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }

    /// True for failures caused by bad user input.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams(_) | Error::DimensionMismatch(_) | Error::Cfl { .. }
        )
    }
}
