//! Pitch-conditioned prosody transfer toolkit.
//!
//! Signal analysis (`audio`, `spectral`, `pitch`), objective metrics (`metrics`),
//! the three transfer architectures (`model`), training (`train`), inference-time
//! transfer (`pipeline`) and corpus handling (`corpus`).

pub mod audio;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pitch;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
