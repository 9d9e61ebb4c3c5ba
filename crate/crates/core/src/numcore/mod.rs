//! Dense `f32` tensors and a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] is rebuilt for every forward pass. Learned weights live in a
//! [`ParamStore`] outside the graph and are copied in as leaves, so dropping the
//! graph after a step never touches parameters.

mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_inputs, GradcheckReport};
pub use graph::{Gradients, Graph, Taps, TapsBuilder, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Probability clamp applied inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;
