//! Vision-Transformer single-image super-resolution with a two-stage
//! training protocol: colorization pretraining, then residual 4x
//! super-resolution fine-tuning under a weighted L1 + SSIM objective.
//!
//! The crate is self-contained: [`diffcore`] provides the differentiable
//! tensor substrate, [`model`] the network, [`losses`] the objective,
//! [`imageops`] resampling and metrics, [`data`] pair synthesis, and
//! [`training`] the optimizer, schedule, early stopping and checkpoints.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod imageops;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
