pub mod cli;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod losses;
pub mod objectives;
pub mod optimizers;
pub mod seeds;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
