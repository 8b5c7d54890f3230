pub mod cli;
pub mod config;
pub mod error;
pub mod flops;
pub mod kv_cache;
pub mod model;
pub mod routing;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
