pub mod bench;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod guidance;
pub mod kernel;
pub mod metrics;
pub mod sampler;

pub use error::{Result, SparkeError};
