//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor) values.

mod graph;
mod ops;

pub use graph::{Graph, Var};
pub use ops::{ConvGeom, ScanInputs, Unary};
