//! Multi-view splenomegaly segmentation pipeline: volume preprocessing, a
//! large-kernel fully convolutional generator with a conditional patch
//! discriminator, batch-level Dice plus gated least-squares adversarial
//! training, multi-view fusion, and volumetric/surface evaluation.

pub mod checkpoint;
pub mod dist;
pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod slices;
pub mod stream;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
