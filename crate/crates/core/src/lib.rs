pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod rkhs;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
