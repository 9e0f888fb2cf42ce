pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
