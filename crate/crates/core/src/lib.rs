//! Desk-scale one-step spectrogram diffusion: EDM pretraining plus
//! consistency tuning on a gated U-Net denoiser.
//!
//! This crate holds the math: noise-level schedules and preconditioning,
//! the denoiser with its own reverse-mode tape, the masked diffusion and
//! consistency losses, Adam/EMA update rules, deterministic ODE samplers,
//! synthetic data generation and evaluation metrics. Everything is a pure
//! function of its inputs (plus an explicitly passed RNG); file formats,
//! logging and the CLI live in the companion `difftune` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use scalar::Scalar;
pub use tensor::{FrameMask, Shape, Tensor};
