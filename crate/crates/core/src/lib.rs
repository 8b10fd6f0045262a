pub mod config;
pub mod dqr;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::ModelError;
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Graph64 = tensor::Graph<f64>;
