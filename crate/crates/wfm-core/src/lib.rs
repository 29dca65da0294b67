//! Desk-scale laboratory for box-free watermarking of toy generative models.
//!
//! The crate is organized around a small differentiable core and the pieces
//! built on top of it:
//!
//! - [`diffcore`]: tensors, reverse-mode gradients, optimizers, parameter
//!   flatten/perturb utilities.
//! - [`wmcodec`]: the watermark encoder/decoder pair, its joint training, and
//!   the differentiable distortion ("noise") layer.
//! - [`toygen`]: procedural toy datasets and desk-scale generators trained
//!   with adversarial or reconstruction losses.
//! - [`wfmembed`]: watermark embedding via the perturbation-averaged update
//!   rule, plus the baseline (no-perturbation) mode and a flatness probe.
//! - [`attacks`]: model-level and image-level watermark removal attacks.
//! - [`verify`]: exact binomial ownership-verification statistics.
//! - [`metrics`]: bit accuracy, PSNR, and a small-scale Fréchet distance.
//! - [`harness`]: checkpoints, configs, manifests, sweeps, CSV/SVG reports.

pub mod attacks;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod toygen;
pub mod verify;
pub mod wfmembed;
pub mod wmcodec;

pub use error::{Error, Result};
