use thiserror::Error;

/// Errors produced by mesh construction, assembly and the solvers.
#[derive(Debug, Error)]
pub enum RteError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("unsupported quadrature degree {degree}; supported degrees are {supported}")]
    UnsupportedDegree { degree: usize, supported: String },

    #[error("factorization failed for block {block}: {reason}")]
    Factorization { block: usize, reason: String },

    #[error("iteration limit {max_iter} exceeded, last relative residual {residual:.3e}")]
    MaxIterations {
        max_iter: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("eigensolver did not converge: {0}")]
    EigenFailure(String),

    #[error("power iteration did not converge within {max_iter} steps, last Rayleigh quotient {last:.6e}")]
    PowerIterationFailure { max_iter: usize, last: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RteError>;

impl RteError {
    pub fn dim(expected: usize, got: usize, context: &str) -> Self {
        RteError::DimensionMismatch {
            expected,
            got,
            context: context.to_string(),
        }
    }
}
