//! Visible-to-thermal facial image translation lab.
//!
//! This crate implements an image-to-image translation pipeline that learns to
//! map visible-light face photographs to thermal (long-wave infrared) images:
//!
//! - an anti-aliased U-Net generator / patch discriminator GAN with a
//!   relativistic adversarial objective and a loss stack covering perceptual,
//!   temperature-consistency, patch-triplet, and Fourier (amplitude + phase)
//!   terms — with patch-level and global Fourier variants;
//! - a conditional denoising-diffusion baseline over grayscale thermal images;
//! - evaluation metrics (FID with a pluggable feature extractor, log-magnitude
//!   spectrum MSE) and spectrum tooling;
//! - a deterministic synthetic paired-face dataset so the whole pipeline runs
//!   end-to-end on a CPU in minutes.
//!
//! Everything is seeded and single-threaded: the same config and seed
//! reproduce training traces byte-for-byte, and interrupted runs resume
//! exactly. See the `examples/` directory for end-to-end entry points; the
//! `vtf` binary exposes the same flows as subcommands.

pub mod autodiff;
pub mod blocks;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use rng::RunSeed;
pub use scalar::Scalar;
