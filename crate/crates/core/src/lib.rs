//! Gradient-based intra-attention structured pruning of a small transformer
//! encoder, trained with task-specific knowledge distillation.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod factorize;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod report;
pub mod tensor;

pub use error::{GrainError, Result};
pub use tensor::{Scalar, Tensor};
