pub mod autodiff;
pub mod data;
pub mod elbo;
pub mod error;
pub mod eval;
pub mod exact;
pub mod gssm;
pub mod infnet;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
