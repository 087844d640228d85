//! Two-view common representation learning with step-based correlation
//! convolutional autoencoders.
//!
//! The crate is split into:
//! - [`engine`]: tensors, a tape-based autodiff engine, layer primitives,
//!   Adam and a finite-difference gradient checker;
//! - [`model`]: architecture presets, encoder/decoder, loss terms, training
//!   and checkpoints;
//! - [`data`]: MNIST IDX loading, half-image views, batching and a synthetic
//!   planted-correlation generator;
//! - [`eval`]: sum correlation, closed-form CCA, cross-view transfer
//!   accuracy and reconstruction images.

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;

pub use error::{Error, Result};
