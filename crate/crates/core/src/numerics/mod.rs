//! Dense tensors, reverse-mode differentiation and the shared attention kernel.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod tensor;

pub use attention::{attention, attention_with_weights, AttentionParams};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, ParamGrads, Var, ZERO_ROW};
pub use nn::{LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::{ParamBuilder, ParamId, ParamSet, Parameter};
pub use tensor::Tensor;
