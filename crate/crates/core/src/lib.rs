pub mod cli;
pub mod config;
pub mod corpus;
pub mod cue;
pub mod data;
pub mod encoder;
pub mod error;
pub mod head;
pub mod label;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phrase;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
pub use label::Label;
pub use tensor::{Parameter, Tensor, TensorError};
