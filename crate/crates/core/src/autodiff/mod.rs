//! Reverse-mode differentiation with two gradient accumulators per parameter.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, random_projection, random_tensor};
pub use graph::{Gradients, Graph, Var};
pub use params::{GradChannel, ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;
