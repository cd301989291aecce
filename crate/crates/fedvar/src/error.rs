use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Operand dimensions do not line up.
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A matrix that must be symmetric is not, within tolerance.
    NotSymmetric {
        max_asymmetry: f64,
    },
    /// A matrix that must be positive semi-definite has an eigenvalue
    /// below the clamping tolerance, or a Cholesky pivot failed.
    NotPsd {
        min_eigenvalue: f64,
    },
    /// A log-density, gradient, or ELBO term came out NaN or infinite.
    /// Signals divergence; callers abort the run.
    NonFinite {
        context: &'static str,
    },
    /// An iterative solver did not meet its tolerance.
    NonConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },
    /// A precondition on user-facing inputs failed (nonpositive scale,
    /// label out of range, infeasible skew, ...).
    InvalidArgument(String),
    /// Federation protocol violation (round mismatch, missing or
    /// duplicate silo report).
    Protocol(String),
    /// Experiment configuration is invalid.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch {
                context,
                expected,
                got,
            } => write!(
                f,
                "{context}: dimension mismatch, expected {expected}, got {got}"
            ),
            Error::NotSymmetric { max_asymmetry } => {
                write!(
                    f,
                    "matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})"
                )
            }
            Error::NotPsd { min_eigenvalue } => {
                write!(
                    f,
                    "matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})"
                )
            }
            Error::NonFinite { context } => write!(f, "{context}: non-finite value"),
            Error::NonConvergence {
                context,
                iterations,
                residual,
            } => write!(
                f,
                "{context}: no convergence after {iterations} iterations (residual {residual:e})"
            ),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
