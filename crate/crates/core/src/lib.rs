//! Numerical core for DCT-based harmonic convolution blocks.
//!
//! A harmonic block expresses a convolutional layer as fixed DCT-II filter
//! responses followed by a learned combination across channels and
//! frequencies. This crate implements the block in its two equivalent
//! formulations (transform-then-combine and merged single convolution),
//! spectrum truncation and compression planning, parameter/operation
//! accounting, conversion of pretrained convolution weights, a small
//! CPU training harness, dataset plumbing, and timing helpers.

pub mod bench;
pub mod bn;
pub mod compress;
pub mod conv;
pub mod convert;
pub mod data;
pub mod dct;
pub mod error;
pub mod grad;
pub mod harmonic;
pub mod model;
pub mod modelfile;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
