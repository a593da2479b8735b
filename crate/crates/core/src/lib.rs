pub mod audio;
pub mod autograd;
pub mod bench;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod model;
pub mod nn;
pub mod sequencer;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;
pub mod websearch;

pub use error::{Error, Result};
