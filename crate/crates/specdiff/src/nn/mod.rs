//! Minimal f64 neural-network substrate: flat parameter vectors addressed by
//! a named layout, functional layer ops with explicit caches and hand-derived
//! backward passes, and an Adam optimizer. Double precision throughout so
//! gradients can be validated against central finite differences.

pub mod adam;
pub mod denoiser;
pub mod layout;
pub mod ops;

pub use adam::Adam;
pub use layout::{ParamLayout, TensorSpec};
