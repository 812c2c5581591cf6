use thiserror::Error;

/// Errors raised by tensor construction, tape operations and the gradient oracle.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite or out-of-domain value {value} at index {index}")]
    Numeric {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
