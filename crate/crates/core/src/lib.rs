//! Conditional dynamic radiance fields for two-person dialogue avatars.
//!
//! The crate covers audio feature extraction, a causal pose forecaster, a
//! shared conditional radiance field with per-identity latent codes, volume
//! rendering, training, image metrics and the `duet` command line tool.

pub mod audio;
pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod posegen;
pub mod render;
pub mod train;

pub use error::{Error, Result};
