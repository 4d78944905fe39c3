//! Tensor algebra, reverse-mode differentiation and optimization.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, AttentionRecord, Elementwise, Graph, Mask, Var};
pub use optim::{noam_lr, Adam, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
