//! Differentiable computation: tensors, the reverse-mode graph, named
//! parameters, and gradient verification.

pub mod activations;
mod check;
mod graph;
mod params;
mod tensor;

pub use check::{
    compare_gradients, scaled_floor, evaluate, evaluate_with_gradients, finite_difference_oracle,
    finite_difference_oracle_multi, relative_error,
    GradientComparison,
};
pub use graph::{Gradients, Graph, NonFiniteOp, Unary, Var};
pub use params::{read_tensors, write_tensors, BoundParams, GradientRecord, ParamId, ParameterSet};
pub use tensor::Tensor;

#[cfg(test)]
mod primitive_tests;
