//! Anomaly detection for univariate time series built on a discrete
//! time-frequency token representation.
//!
//! The pipeline has three learned stages and a scoring stage:
//!
//! 1. [`spectral`] maps a window of the series to a two-channel
//!    time-frequency image (STFT real/imaginary parts) and back.
//! 2. [`tokenizer`] compresses that image into a grid of discrete codebook
//!    tokens with a convolutional encoder/decoder and a vector quantizer.
//!    Every frequency row is processed independently so that one row's
//!    content can never leak into another's tokens.
//! 3. [`prior`] fits a bidirectional masked transformer over token grids so
//!    that the probability of any token given its surroundings can be read
//!    off the softmax outputs.
//! 4. [`scoring`] slides a masked latent window over a full series,
//!    converts token improbability into a per-timestep anomaly score
//!    (aggregated over window sizes and frequency bands), and maps the
//!    latent-rate scores back to data-space timesteps.
//!
//! [`counterfactual`] resamples masked windows at flagged locations to show
//! what the model expected instead, [`eval`] implements the archive
//! evaluation protocol (top-k hit within an adjusted anomaly interval), and
//! [`cli`] wires everything into a command-line front end.

pub mod cli;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod plot;
pub mod prior;
pub mod scoring;
pub mod spectral;
pub mod tokenizer;

pub use error::{Error, Result};

/// Tensor training/inference allocates and frees many short-lived
/// buffers; mimalloc roughly halves the allocator's share of training
/// wall time versus the system allocator on a single core.
#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;
