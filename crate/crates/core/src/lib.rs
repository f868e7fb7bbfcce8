pub mod autograd;
pub mod backbone;
pub mod config;
pub mod corruption;
pub mod dataio;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
