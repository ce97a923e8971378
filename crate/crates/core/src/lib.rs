//! Unsupervised self-training domain adaptation for a small window detector.
//!
//! The final fully connected layer of each model is split into an
//! element-wise-multiply layer and a sum layer, so a mean-embedding MMD
//! penalty can be placed on the element-wise products while the target
//! model retrains on its own high-confidence detections.

pub mod adapt;
mod codec;
pub mod detector;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
