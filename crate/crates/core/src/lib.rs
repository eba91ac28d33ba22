pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod forecaster;
pub mod grid;
pub mod inference;
pub mod nn;
pub mod plot;
pub mod rprc;
pub mod synth;
pub mod tokenizer;
pub mod verify;

pub use error::{Error, Result};
