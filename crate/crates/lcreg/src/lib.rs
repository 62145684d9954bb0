//! Training engine for long-tailed recognition with a shared latent-category
//! feature pool and covariance-driven implicit augmentation.

pub mod aug;
pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod isda;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pool;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{finite_diff_gradient, Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
