use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("integer accumulator bound exceeded: inner dimension {inner}, activation bits {act_bits}, weight bits {weight_bits}")]
    AccumulatorOverflow {
        inner: usize,
        act_bits: u32,
        weight_bits: u32,
    },

    #[error("structural mismatch: {0}")]
    Structure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
