//! Harmonization of directional diffusion signals across scanner profiles.
//!
//! The crate covers the full loop on synthetic data:
//!
//! * [`sphere`] / [`sh`] - unit directions, rotations, and real even-degree
//!   orthonormal spherical harmonics (fitting, evaluation, rotation).
//! * [`phantom`] - multi-tensor voxel phantoms, scanner profiles with Rician
//!   noise, and paired/labeled dataset generation.
//! * [`net`] - the harmonization network: a shared-weight multilayer
//!   perceptron trained with a supervised term plus a paired scan-consistency
//!   penalty, optimized with RMSProp under k-fold cross-validation.
//! * [`csd`] - constrained spherical deconvolution baseline (response
//!   estimation and super-resolved deconvolution with an iterated active set).
//! * [`metrics`] - angular correlation of coefficient vectors, histogram /
//!   median summaries, and the Wilcoxon signed-rank test.
//! * [`formats`] / [`cli`] - versioned dataset, model, and report files plus
//!   the `nsdn` command-line pipeline built on them.

pub mod cli;
pub mod csd;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod sh;
pub mod sphere;

pub use error::{Error, Result};
