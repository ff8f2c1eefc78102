use thiserror::Error;

/// Errors raised by expression evaluation, functionals, optimizers and search.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FexError {
    #[error("non-finite value during {0}")]
    NonFinite(&'static str),

    #[error("unsupported operator `{0}`")]
    UnsupportedOperator(String),

    #[error("degenerate denominator: estimate {0:e} is below 1e-12")]
    DegenerateDenominator(f64),

    #[error("line search failed after {0} halvings")]
    LineSearchFailure(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("search produced no candidate")]
    NoCandidate,
}

pub type Result<T> = std::result::Result<T, FexError>;
