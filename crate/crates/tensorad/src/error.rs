use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes violate the op's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An op's precondition other than shape was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An op produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
