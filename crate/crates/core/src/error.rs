use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RirError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {relative_residual:.3e})")]
    CgNotConverged {
        iterations: usize,
        relative_residual: f64,
    },

    #[error("solver failure at flow step {step}: {source}")]
    FlowStep {
        step: usize,
        #[source]
        source: Box<RirError>,
    },
}

impl RirError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RirError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        RirError::Config(msg.into())
    }

    /// True for failures raised by an iterative solver rather than by bad input.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            RirError::CgNotConverged { .. } | RirError::Domain(_) => true,
            RirError::FlowStep { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, RirError>;

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(RirError::LengthMismatch { expected, actual });
    }
    Ok(())
}
