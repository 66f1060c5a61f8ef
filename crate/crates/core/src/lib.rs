pub mod detectors;
pub mod encoder;
pub mod error;
pub mod mdp;
pub mod numerics;
pub mod pipeline;
pub mod sac;
pub mod tokenizer;
pub mod traffic;

pub use error::{Error, Result};
