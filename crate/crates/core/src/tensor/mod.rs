//! Dense matrices, reverse-mode differentiation, and the layers built on them.

mod graph;
mod matrix;
pub mod nn;
mod params;
mod rng;

use thiserror::Error;

pub use graph::{Gradients, Graph, SplatPlan, Unary, Var, FOCAL_CLAMP};
pub use matrix::Matrix;
pub use params::{Binding, ParamId, ParamStore};
pub use rng::RngStream;
pub(crate) use graph::focal_value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("data length {len} does not match a {rows}x{cols} matrix")]
    DataLength { len: usize, rows: usize, cols: usize },
    #[error("layer_norm needs rows of width >= 2, got {0}")]
    DegenerateRow(usize),
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("backward requires a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
}
