//! Person-hiding adversarial patches, white-frame defenses and their
//! evaluation on a bundled toy detector.

pub mod artifact;
pub mod attack;
pub mod dataset;
pub mod defense;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod optim;
pub mod seed;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
