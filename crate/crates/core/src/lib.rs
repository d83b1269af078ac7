//! Content-aware token aggregation network for lightweight image
//! super-resolution.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod network;
pub mod params;
pub mod tensor;
pub mod token_agg;
pub mod training;
pub mod vis;

pub use error::{Error, Result};
pub use tensor::Tensor;
