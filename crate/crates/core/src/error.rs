use thiserror::Error;

/// Failures raised by the numerical engine.
///
/// Variants are grouped so callers (the CLI, the C ABI) can map them onto
/// coarse exit/status codes with [`Error::kind`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model field `{field}`: {reason}")]
    InvalidModel { field: String, reason: String },

    #[error("covariance of column {column}: {reason}")]
    Covariance { column: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error at entry {index}: {reason}")]
    Domain { index: usize, reason: String },

    #[error("iterate left the admissible domain at iteration {iteration} (entry {index})")]
    DomainEscape { iteration: usize, index: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular or ill-conditioned system (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("contraction violated: measured bound {bound} (limit {limit})")]
    ContractionViolated { bound: f64, limit: f64 },

    #[error("spectral check failed at {step}: norm {norm} >= 1")]
    SpectralCheck { step: String, norm: f64 },

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("tail fit failed: {0}")]
    FitFailure(String),

    #[error("estimation failure: {0}")]
    Estimation(String),

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

/// Coarse classification used for exit codes and C status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input: model, config or argument.
    Input,
    /// Numerical failure: non-convergence, domain escape, singular systems.
    Numerical,
    /// Filesystem trouble.
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidModel { .. }
            | Error::Covariance { .. }
            | Error::InvalidArgument(_)
            | Error::Config(_) => ErrorKind::Input,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidModel {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
