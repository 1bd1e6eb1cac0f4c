use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations and the alignment modules.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: expected a tensor of rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("shape {shape:?} needs {expected} elements, data has {actual}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },

    #[error("tensor rank {0} exceeds the supported maximum of 4")]
    RankTooLarge(usize),

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: empty partition, mean is undefined")]
    EmptyPartition { op: &'static str },

    #[error("boxes {0} and {1} overlap")]
    OverlappingBoxes(usize, usize),

    #[error("mask quality is not evaluable: labels contain no facade pixels")]
    NotEvaluable,
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { op, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
