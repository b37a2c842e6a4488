//! Differentiable kernels and the finite-difference checking harness.

mod graph;
mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use graph::{gelu, Backward, GradMode, Graph, Var};
pub use gradcheck::{check_store, grad_check, GradCheckConfig, GradReport};
pub use ops::{affine, causal_self_attention, AttentionProjections};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor2;
