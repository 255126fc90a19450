use thiserror::Error;

use crate::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Shape, len: usize },
    #[error("{op}: output extent ({extent} + 2·{pad} − {kernel}) / {stride} is not integral")]
    NonIntegralExtent {
        op: &'static str,
        extent: usize,
        pad: usize,
        kernel: usize,
        stride: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Shape),
    #[error("loss is detached from every tracked tensor")]
    Detached,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
