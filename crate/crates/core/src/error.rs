use thiserror::Error;

/// Errors raised across the library.
///
/// Each variant maps onto one of the CLI exit classes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})")]
    SingularMatrix { lambda_min: f64, lambda_max: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("implicit update did not converge after {iterations} sweeps (last change {change:e})")]
    ImplicitNonconvergence { iterations: usize, change: f64 },

    #[error("optimistic step at t = {t} needs the previous iterate")]
    MissingHistory { t: usize },

    #[error("step size {eta} exceeds the real-square-root limit {limit}")]
    StepTooLarge { eta: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error: 1 for configuration problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::InvalidParam(_) => 1,
            Error::DimensionMismatch { .. } => 1,
            Error::SingularMatrix { .. }
            | Error::NumericalFailure(_)
            | Error::ImplicitNonconvergence { .. }
            | Error::MissingHistory { .. }
            | Error::StepTooLarge { .. }
            | Error::DegenerateSpectrum(_) => 2,
        }
    }
}
