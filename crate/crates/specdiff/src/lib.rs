pub mod classifier;
pub mod cli;
pub mod diffmath;
pub mod evalkit;
pub mod features;
pub mod hsio;
pub mod nn;
pub mod pretrain;
pub mod error;
pub mod store;

pub use error::{Error, Result};
