//! Bidirectional transformer representation learning over multimodal
//! health-record event sequences.

pub mod error;
pub mod rng;
pub mod sequencer;
pub mod cli;
pub mod cohort;
pub mod tensor;
pub mod trainer;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod vocab;

pub use error::{Error, Result};
