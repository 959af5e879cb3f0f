//! Depth completion with image-guided, spatially-variant convolutions.
//!
//! The crate is organized bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine over NCHW tensors, [`guided`] holds the guided
//! convolution, and [`network`] assembles the two-branch completion model.

pub mod check;
pub mod cost;
pub mod data;
pub mod error;
pub mod guided;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, ErrorCategory, Result};
