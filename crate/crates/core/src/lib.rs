//! Prototype mixture models for few-shot semantic segmentation.

pub mod ablate;
pub mod data;
pub mod em;
pub mod eval;
pub mod error;
pub mod image;
pub mod net;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
