//! Reverse-mode differentiable array engine.

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::Sgd;
pub use tensor::Tensor;
