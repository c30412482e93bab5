//! Looped vision transformer for ARC-style grid reasoning.

pub mod arc;
pub mod error;
pub mod halting;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
