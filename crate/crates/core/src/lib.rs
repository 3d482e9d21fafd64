pub mod adaptive_sampling;
pub mod error;
pub mod features;
pub mod geometry;
pub mod global_context;
pub mod harness;
pub mod local_geometry;
pub mod pipeline;
pub mod sparse_attention;

pub use error::{Error, Result};
