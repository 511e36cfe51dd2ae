//! Dense tensors, the differentiable op graph, neural layers and cost
//! accounting.

pub mod cost;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use cost::{CostBuilder, CostReport, LayerCost};
pub use graph::{Graph, Op, OpRecord, ScalarObjective, Unary, Var};
pub use params::{standard_normal, Gradients, Init, ParamBuilder, ParamEntry, ParamSpec, ParamStore};
pub use tensor::Tensor;
