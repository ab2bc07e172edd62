//! Gradient-based training-data influence tracing.
//!
//! A tiny byte-level decoder is fine-tuned through low-rank adapters with
//! plain SGD, checkpointed, and then probed: per-example completion-loss
//! gradients at each checkpoint are compared by inner product to estimate
//! how much training on one example would reduce the loss on another.

pub mod cli;
pub mod error;
pub mod influence;
pub mod io;
pub mod model;
pub mod oracle;
pub mod study;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
