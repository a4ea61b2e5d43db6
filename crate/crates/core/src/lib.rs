//! Desk-scale study of how DP-SGD suppresses memorization of long-tailed data.
//!
//! The crate is organised bottom-up:
//!
//! * [`datagen`] builds orthogonal class signals, class-dependent noise
//!   transforms with a prescribed noise-correlation ratio, and samples
//!   two-patch datasets.
//! * [`model`] is the two-layer ReLU CNN with a fixed `1/m` second layer,
//!   softmax cross-entropy and closed-form per-sample gradients.
//! * [`dp_optimizer`] runs clean SGD or DP-SGD (per-sample clipping, `1/B`
//!   averaging, Gaussian noise on the parameters) and records a trace.
//! * [`evaluation`] holds the memorization metrics, test error, the
//!   L-long-tailed partition and closed-form diagnostic bounds.
//! * [`influence`] scores real images by their leave-one-out effect on the
//!   class covariance Frobenius norm.
//! * [`mnist_io`] parses IDX files and patchifies images.
//! * [`harness`] wires everything into reproducible experiments.

pub mod datagen;
pub mod dp_optimizer;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod harness;
pub mod influence;
pub mod mnist_io;
pub mod model;
pub mod rng;

pub use error::{Error, Result};

/// Version string embedded in output provenance headers.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
