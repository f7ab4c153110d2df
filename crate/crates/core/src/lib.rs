//! Selective state-space language models and a perplexity-driven structured
//! pruning engine.

pub mod error;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod shedder;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
