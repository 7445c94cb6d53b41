//! Joint speech-quality (MOS) and room-acoustics estimation.
//!
//! The crate is organised as a pipeline:
//!
//! - [`audio`]: WAV I/O and resampling to the native 48 kHz rate.
//! - [`frontend`]: log-mel spectrogram and overlapping segment extraction.
//! - [`acoustics`]: reference labels (T60, C50, DRR, STI, SNR) from impulse responses.
//! - [`synth`]: synthetic impulse responses, degraded mixtures and corpus generation.
//! - [`tensor`]: a small reverse-mode autodiff engine with the layers the model needs.
//! - [`model`]: the shared-encoder, six-head estimator and its file format.
//! - [`train`]: interleaved multi-task training with MOS-based early stopping.
//! - [`eval`]: correlation and RMSE after third-order polynomial mapping.

pub mod acoustics;
pub mod audio;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
