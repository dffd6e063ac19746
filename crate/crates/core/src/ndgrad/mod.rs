//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built eagerly: every operation computes its value
//! immediately and records enough to run the adjoint later. Graphs are meant
//! to live for a single forward/backward pass and then be dropped.
//!
//! ```
//! use ctxpair::ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error};
pub use graph::{Graph, Node, Op, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op} needs at least 2 rows, got {rows}")]
    DegenerateBatch { op: &'static str, rows: usize },
    #[error("axis {axis} is out of range for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("row {row} has zero norm in {op}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
