//! Multi-stream residual transformer with manifold-constrained
//! hyper-connections, plus stream-level interpretability tooling: CKA
//! similarity, activation patching, and ablation-and-rescue experiments.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod interventions;
pub mod model;
pub mod numerics;
pub mod routing;
pub mod similarity;
pub mod training;

pub use error::{Error, Result};
