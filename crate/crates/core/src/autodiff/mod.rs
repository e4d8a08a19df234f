//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! gradient gating by parameter group.

mod graph;
mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{Graph, InputGrads, Var};
pub use params::{GroupSet, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
