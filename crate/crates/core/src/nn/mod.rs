//! Minimal differentiable building blocks for the segmentation networks.

mod graph;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, PoolKind, Var, NORM_EPS};
pub use params::{Adam, AdamConfig, BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;
