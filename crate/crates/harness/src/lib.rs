//! Experiment harness: simulators, model recipes, oracles and paired method comparisons.

pub mod alloc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod partition;
pub mod recipe;
pub mod simulate;

pub use error::{HarnessError, Result};
