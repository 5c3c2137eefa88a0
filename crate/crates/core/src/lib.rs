pub mod audio;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
