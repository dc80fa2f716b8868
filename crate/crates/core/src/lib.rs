pub mod cli;
pub mod config;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod llm;
pub mod losses;
pub mod model;
pub mod optim;
pub mod probing;
pub mod resampler;
pub mod sequence;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
