//! Differentiable dense-array computation.

pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
pub use nn::{linear, mlp_forward, norm};
pub use params::{init_mlp, init_norm, uniform_tensor, Gradients, ParamSet};
pub use tape::{Backward, Tape, Var};
pub use tensor::{lit, Real, Tensor};

#[cfg(test)]
mod tests;
