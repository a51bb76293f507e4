//! Layer-wise orthogonalization for training robust ensembles.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, a Jacobi SVD oracle, power iteration with
//!   deflation and a seeded RNG.
//! - [`layers`]: dense, circular 1-D and 2-D convolution layers with exact
//!   backward passes and a linear-operator view of their linear part.
//! - [`spectral`]: the closed-form spectrum of single-channel circular
//!   convolutions, the gap/cross bounds built on it, and spectral-norm clipping.
//! - [`nets`]: small feedforward classifiers, SGD and adversarial training.
//! - [`lotos`]: the pairwise top-k orthogonalization penalty and the ensemble
//!   training loop.
//! - [`attacks`]: projected gradient descent under L2 or L-infinity balls.
//! - [`evaluation`]: transferability rates, black-box robust accuracy and the
//!   risk-gap inequality checker.
//! - [`toolkit`]: datasets, checkpoints, experiment configs and recipes.

pub mod attacks;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod lotos;
pub mod nets;
pub mod numerics;
pub mod spectral;
pub mod toolkit;

pub use error::{Error, Result};

/// Version string written into manifests and checkpoints.
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
