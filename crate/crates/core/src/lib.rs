pub mod cli;
pub mod config;
pub mod container;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod inversion;
pub mod nn;
pub mod paired;
pub mod tensor;
pub mod training;
pub mod wave;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
