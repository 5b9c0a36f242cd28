use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("box QP did not converge after {iterations} iterations (projected gradient {residual:.3e})")]
    QpNotConverged { iterations: usize, residual: f64 },

    #[error("backtracking exceeded {trials} trials (last lambda {lambda:.3e})")]
    BacktrackingFailed { trials: usize, lambda: f64 },

    #[error("trace diagnostics failed: {0}")]
    DiagnosticsFailed(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-parseable identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "SHAPE",
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::Config(_) => "CONFIG",
            Error::Numeric(_) => "NUMERIC",
            Error::QpNotConverged { .. } => "QP_NOT_CONVERGED",
            Error::BacktrackingFailed { .. } => "BACKTRACKING_CAP",
            Error::DiagnosticsFailed(_) => "DIAGNOSTICS_FAILED",
            Error::Format(_) => "FORMAT",
            Error::Io(_) => "IO",
            Error::Csv(_) => "CSV",
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::QpNotConverged { .. }
                | Error::BacktrackingFailed { .. }
                | Error::DiagnosticsFailed(_)
        )
    }
}
