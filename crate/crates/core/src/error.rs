use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine, the model, and the training loops.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A documented precondition of an operation was violated.
    #[error("contract violated: {0}")]
    Contract(String),
    /// Data failed an invariant check (graph, split, embeddings, config).
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("cannot stratify: class {class} has only {count} nodes (need at least 3)")]
    Stratification { class: usize, count: usize },
    #[error("no active training node was drawn this epoch")]
    EmptyActiveSet,
    #[error("gradient check harness: {0}")]
    Harness(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
