//! Dense tensors and a small reverse-mode autodiff engine.

pub mod graph;
pub mod scalar;
pub mod tensor;

pub use graph::{softmax_in_place, Gradients, Graph, Var};
pub use scalar::{dot, gemm, DType, Scalar};
pub use tensor::Tensor;
