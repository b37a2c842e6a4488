//! Unified sign / lip / audio fusion for multi-task sequence generation.

pub mod cli;
pub mod decoder;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
