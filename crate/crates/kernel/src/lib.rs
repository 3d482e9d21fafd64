//! Minimal dense-tensor kernel with tape-based reverse-mode differentiation.
//!
//! Every value is a row-major `f64` [`Tensor`]. Operations are recorded on a
//! [`Graph`]; learned weights live in a [`ParamStore`] and enter a graph via
//! [`Graph::param`]. [`Graph::backward`] accumulates gradients into the store.
//! Every primitive rejects shape mismatches and non-finite results.

pub mod checkpoint;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
mod linalg;
mod ops;
pub mod param;
pub mod tensor;

pub use error::{KernelError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradReport};
pub use graph::{Graph, Var};
pub use layers::{LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use ops::basic::ZERO_ROW;
pub use ops::conv::{conv_out_size, reflect_index};
pub use ops::nn::softmax_in_place;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Seeded generator used for all initialisation and sampling.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
