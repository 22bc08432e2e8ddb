pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
#[cfg(feature = "experiments")]
pub mod experiment;
pub mod nn;
pub mod paradigm;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
