//! Dense matrices, a reverse-mode tape and the AdamW optimiser.

mod matrix;
mod optim;
mod tape;

use thiserror::Error;

pub use matrix::{argmax, softmax, Matrix};
pub use optim::{AdamW, ParamStore};
pub use tape::{Gradients, NodeId, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {}x{} and {}x{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{rows}x{cols} matrix needs {} values, got {len}", .rows * .cols)]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("concat of zero matrices")]
    EmptyConcat,
    #[error("{op}: range {start}..{} outside {}x{}", .start + .len, .shape.0, .shape.1)]
    OutOfRange {
        op: &'static str,
        shape: (usize, usize),
        start: usize,
        len: usize,
    },
    #[error("backward needs a 1x1 loss, got {}x{}", .shape.0, .shape.1)]
    NonScalarLoss { shape: (usize, usize) },
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        TensorError::Shape { op, left, right }
    }
}
