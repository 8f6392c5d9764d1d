pub mod artifacts;
pub mod backend;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod eval;
pub mod experiment;
pub mod permute;
pub mod probing;
pub mod rng;
pub mod scoring;
pub mod template;

pub use error::{Error, Result};
