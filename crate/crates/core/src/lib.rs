//! KANITE: Kolmogorov-Arnold networks for individual treatment effect
//! estimation with multiple treatments.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense tensors.
//! - [`spline`]: B-spline bases and learnable univariate activations.
//! - [`kan`]: KAN layers, the representation network, treatment heads and
//!   the assembled model.
//! - [`losses`]: factual regression loss and the MMD, Wasserstein and
//!   entropy-balancing representation losses.
//! - [`metrics`]: ITE/ATE estimands and the PEHE / ATE error metrics.
//! - [`data`]: dataset schema, CSV ingestion, splits, normalisation and a
//!   synthetic confounded generator.
//! - [`trainer`]: the minibatch training loop, evaluation and sweeps.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod kan;
pub mod losses;
pub mod metrics;
pub mod spline;
pub mod trainer;

pub use error::{Error, Result};
