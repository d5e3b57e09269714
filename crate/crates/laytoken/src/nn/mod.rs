//! Differentiable transformer substrate: tensors with explicit backward
//! passes, rotary positions over arbitrary ids, causal attention, pre-norm
//! blocks, and a finite-difference gradient checker.

pub mod attention;
pub mod block;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rope;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{Model, ModelConfig, TokenInput};
pub use tensor::{Param, Tensor};
