pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod masking;
pub mod model;
pub mod parallel;
pub mod seg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
