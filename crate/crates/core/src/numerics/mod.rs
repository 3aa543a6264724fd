//! Dense matrices, reverse-mode differentiation and seeded randomness.

mod finite_diff;
mod graph;
mod matrix;
mod rng;

pub use finite_diff::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use graph::{Graph, NodeId};
pub use matrix::Matrix;
pub use rng::{derive_seed, Rng};
