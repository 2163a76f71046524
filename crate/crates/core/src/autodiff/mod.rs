//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! accumulates gradients into every node that requires them. Only the
//! primitives the switched transformer needs are provided.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{gelu_scalar, ElementwiseOp, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown elementwise op `{0}`")]
    UnknownOp(String),
    #[error("elementwise `{0}` needs a second operand")]
    MissingOperand(&'static str),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
