//! Speech enhancement by spectrum-image translation.
//!
//! Noisy speech is turned into 256x256 "MelPow" images (Mel-warped,
//! power-law companded magnitude spectrograms), translated by a U-Net whose
//! encoder is the VGG19 convolutional stack, and resynthesized with the
//! noisy phase.
//!
//! Module map:
//! - [`dsp`]: windows, STFT / inverse STFT, WAV I/O and resampling.
//! - [`perceptual`]: Mel warp, companding, normalization, image tiling.
//! - [`data`]: SNR mixing, manifests, batch sampling, synthetic corpora.
//! - [`nn`]: the small tensor engine (conv, relu, pool, upsample, concat, MSE, Adam).
//! - [`model`]: U-Net and VGG19-UNet builders.
//! - [`train`]: training loop, dev selection, checkpoints.
//! - [`enhance`]: noisy waveform in, enhanced waveform out.
//! - [`metrics`]: ESTOI, segmental SNR and report generation.

pub mod data;
pub mod dsp;
pub mod enhance;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perceptual;
pub mod train;

pub use error::{Error, Result};

/// Version string embedded in every artifact this crate writes.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
