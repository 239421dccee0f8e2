//! A desk-scale laboratory for explanation-guided adversarial training.
//!
//! The crate is organized around a composable reverse-mode autodiff tape
//! ([`tensor`]) that supports differentiating through gradients, which is what
//! the saliency-consistency and input-gradient-penalty objectives require.
//! On top of it sit a small convolutional classifier ([`model`]), Grad-CAM
//! saliency maps ([`explain`]), L-inf attacks ([`attacks`]), the composite
//! training objectives ([`losses`]), a synthetic object/background dataset
//! ([`data`]), robustness and explanation-quality metrics plus empirical
//! stability-bound checkers ([`metrics`]), and an Adam training loop
//! ([`train`]).
//!
//! Runnable walkthroughs live in `examples/`; the `egat` binary exposes the
//! same pipelines as reproducible subcommands.

pub mod attacks;
pub mod commands;
pub mod data;
pub mod error;
pub mod explain;
mod image_io;
pub mod metrics;
pub mod model;
pub mod gradcheck;
pub mod losses;
pub mod manifest;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
