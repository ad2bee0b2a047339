//! Fourier-mixing text autoencoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: text normalization, vocabulary construction, story encoding and batching.
//! - [`numerics`]: dense tensors, a reverse-mode gradient tape, initialization and Adam.
//! - [`fourier`]: DFT/FFT kernels and the sequence-axis token-mixing plan.
//! - [`model`]: the encoder/decoder autoencoder and its parameter layout.
//! - [`training`]: teacher-forced training, metrics and binary checkpoints.
//! - [`app`]: seed-text generation, results export and the mixing benchmark.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is on
//! (the default) and fall back to plain iterators otherwise. Both paths
//! produce bitwise-identical results: every reduction runs in a fixed order
//! inside a single task.

pub mod app;
pub mod corpus;
mod error;
pub mod fourier;
pub mod model;
pub mod numerics;
mod par;
pub mod training;

pub use error::{Error, Result};
