//! Event-based video frame interpolation with an event-conditioned latent
//! video diffusion pipeline at desk scale.
//!
//! The crate is organized around the data path of the pipeline:
//!
//! - [`events`]: event records, stream parsing/serialization, slicing and
//!   time reversal for the backward branch.
//! - [`stacker`]: multi-stack frame-aligned event control tensors.
//! - [`simulator`]: synthetic scenes, a contrast-threshold event camera
//!   model, and paired dataset generation.
//! - [`codec`]: latent encoder/decoder (lossless rearrange and lossy pool)
//!   with pre-encode upsampling support.
//! - [`diffusion`]: noise schedule, forward marginal, DDIM stepping, and a
//!   Gaussian oracle denoiser used for verification.
//! - [`adapter`]: the frozen-base / trainable-copy control architecture with
//!   in-repo analytic backpropagation and Adam training.
//! - [`fusion`]: per-tile denoising and fusion, two-side fusion, and the
//!   generation/interpolation pipelines.
//! - [`metrics`]: PSNR/SSIM evaluation with codec-roundtrip normalization.

pub mod adapter;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod events;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod simulator;
pub mod stacker;

pub use error::{Error, Result};
