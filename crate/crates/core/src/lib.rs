//! Online adaptation of a neural vehicle-dynamics model with locally weighted
//! regression pseudo-rehearsal.
//!
//! The pieces, bottom-up:
//!
//! - [`sim`]: ground-truth bicycle-model simulator, tracks, a scripted driver
//!   and dataset generation.
//! - [`lwpr`]: incremental locally weighted regression (one model per target
//!   channel) used to label synthetic inputs.
//! - [`gmm`]: diagonal Gaussian mixture fitted once by EM/BIC and sampled for
//!   synthetic inputs.
//! - [`mlp`]: the 6-32-32-4 tanh network with backprop and ADAM.
//! - [`trainer`]: the constrained update combining real and synthetic
//!   gradients, the local operating set and joint initialization.
//! - [`mppi`]: sampling-based MPC that drives with a network snapshot.
//! - [`metrics`]: per-channel prequential error accumulation.

pub mod error;
pub mod gmm;
pub mod lwpr;
pub mod metrics;
pub mod mlp;
pub mod mppi;
pub mod sim;
pub mod standardize;
pub mod trainer;

pub use error::{Error, Result};
