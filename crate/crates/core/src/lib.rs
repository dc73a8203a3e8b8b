//! Gaussian spatial transport on the CPU.
//!
//! The pipeline fits a 2D Gaussian-splatting model to an annotated image
//! ([`splat2d`]), turns the fitted Gaussians into a fixed row-stochastic
//! pixel-to-annotation transport kernel ([`kernel`]), and trains density
//! regressors with the push-forward L1 loss ([`losses`], [`trainer`]).
//! Sinkhorn-based optimal transport losses and brute-force oracles live
//! alongside for comparison.

// `!(x > 0.0)` style checks are there to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod error;
pub mod experiment;
pub mod imagedata;
pub mod kernel;
pub mod losses;
pub mod splat2d;
pub mod trainer;

pub use error::{Error, Result};
pub use imagedata::{AnnotationSet, AnnotationTarget, DensityMap, Image};
pub use kernel::{CorrespondenceParams, TransportKernel};
pub use losses::LossResult;
pub use splat2d::{FitConfig, Gaussian2D, GaussianScene, Role};
