//! Online gradient estimation for recurrent networks.
//!
//! The crate provides exact real-time recurrent learning (RTRL), the
//! Kronecker-factored RTRL estimator, UORO (plus an averaged variant),
//! truncated BPTT, training loops built on top of them, and the statistical
//! harness used to check unbiasedness and variance scaling.

pub mod analysis;
pub mod cells;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
