//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every op of a forward pass; values live on the graph
//! and are addressed through copyable [`Var`] handles. Parameters are copied
//! in as leaves for each forward pass and their gradients read back after
//! [`Graph::backward`].
//!
//! Broadcasting is limited to equal shapes and scalar operands, plus the
//! explicit row-bias [`Graph::add_row`]. The subgradient at ReLU and
//! `max_with_scalar` kinks is zero.

mod check;
#[cfg(test)]
mod tests;
mod graph;
mod tensor;

pub use check::{central_difference, relative_error, GradCheck};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a vector or matrix, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: range {start}..{} out of bounds for shape {shape:?}", start + len)]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
