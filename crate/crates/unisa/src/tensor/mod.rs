//! Dense tensors and a reverse-mode differentiation graph.
//!
//! Everything downstream (networks, losses, the training loops) is built on
//! two types: [`DenseTensor`], an immutable row-major `f64` array, and
//! [`ValueGraph`], an append-only computation graph that caches forward
//! values and produces gradients by a reverse traversal.

mod dense;
mod graph;

pub use dense::{DenseTensor, TensorError};
pub use graph::{NodeId, ValueGraph};
