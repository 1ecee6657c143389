pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hganet;
pub mod hypergraph;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{HdError, Result};
pub use tensor::Tensor;
