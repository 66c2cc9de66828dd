//! Reverse-mode differentiation over dense tensors and the finite-difference
//! harness that verifies it.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_nodes, GradCheckReport};
pub use graph::{BnMode, CustomOp, Gradients, Graph, NodeId};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape error at node #{node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward requires a scalar output, node #{node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("node #{node} is not a leaf")]
    NotALeaf { node: usize },
}
