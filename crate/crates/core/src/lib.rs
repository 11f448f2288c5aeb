//! Structured pruning of small transformer language models with block-wise
//! importance propagation, its baselines, and the evaluation harness that
//! checks the underlying reconstruction-error bounds.

pub mod calib;
pub mod cli;
pub mod container;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod rng;
pub mod score;
pub mod tensor;
pub mod textgen;
pub mod train;

pub use error::{Error, Result};
