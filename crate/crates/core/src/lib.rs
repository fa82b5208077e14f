pub mod acs;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod generator;
pub mod imageio;
pub mod metrics;
pub mod nn;
pub mod service;
pub mod styleloss;
pub mod tensor;
pub mod trainer;

pub use error::{RegoError, Result};
