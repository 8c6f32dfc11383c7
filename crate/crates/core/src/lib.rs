pub mod bars;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod measures;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

#[cfg(test)]
mod end_to_end;
