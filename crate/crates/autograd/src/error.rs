use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("channel mismatch in {op}: input has {got} channels, weights expect {expected}")]
    ChannelMismatch {
        op: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{op} needs even spatial dimensions, got {height}x{width}")]
    OddDimension {
        op: &'static str,
        height: usize,
        width: usize,
    },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward was already run on this graph")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> GraphError {
    GraphError::Shape {
        op,
        detail: detail.into(),
    }
}
