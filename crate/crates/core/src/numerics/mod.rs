//! Dense tensors, forward kernels, reverse-mode autograd and seeded randomness.

pub mod autograd;
pub mod ops;
pub mod rng;
mod tensor;

pub use autograd::{Backward, Gradients, Graph, ParamId, Var};
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;
