//! Learning image reconstruction from noisy, partial measurements alone.
//!
//! The training objective combines a measurement-domain unbiased risk
//! estimate (so the loss sees through the noise) with a robust equivariance
//! term (so the nullspace of the measurement operator is pinned down by the
//! invariances of the signal set). Everything is built for verification at
//! desk scale: gradients against finite differences, estimators against
//! analytic and brute-force oracles, operators against dense matrices.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`model`]: dense values, reverse-mode
//!   differentiation, the residual conv reconstructor.
//! - [`operators`]: inpainting, subsampled Fourier (MRI), nonlinear CT.
//! - [`noise`]: Gaussian / Poisson / mixed samplers on keyed streams.
//! - [`transforms`]: shift and rotation groups.
//! - [`losses`]: measurement consistency, equivariance, the three unbiased
//!   risk estimators, and the nine-variant training objective registry.
//! - [`trainer`]: Adam, the epoch loop, checkpoints.
//! - [`harness`]: datasets, metrics, verification suites, experiments.

pub mod error;
pub mod harness;
mod kernels;
pub mod losses;
pub mod model;
pub mod noise;
pub mod operators;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{ReiError, Result};
pub use tensor::Tensor;
