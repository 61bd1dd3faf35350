//! Few-shot episodic meta-learning over variable-length feature sequences.
//!
//! The pipeline embeds each sequence with a small convolutional encoder and
//! a pooling head (mean + linear, lateral inhibition, or gated linear unit),
//! classifies queries against class prototypes by cosine similarity, and
//! optionally trains against a dataset discriminator through a gradient
//! reversal layer. At test time each episode may be adapted with a few
//! gradient steps on its own support set.

pub mod cli;
pub mod episodes;
pub mod evaluation;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod protonet;
pub mod seed;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
