//! Weakly supervised two-stream region detector.
//!
//! A network scores a list of candidate regions with two softmax streams
//! (one over classes, one over regions), multiplies them, and sums over
//! regions to get image-level class probabilities. Training needs only
//! image-level labels; localization falls out of the region stream.

pub mod autodiff;
mod error;

pub use error::{Error, Result};
pub mod network;
pub mod evaluation;
pub mod imageops;
pub mod proposals;
pub mod training;
pub mod dataset;
pub mod gradcheck;
pub mod cli;
