//! Privacy attack and defense workbench for classifiers trained on multi-user
//! sensor time series.
//!
//! The crate covers the full loop: data preparation, three network families,
//! DPSGD training with Rényi accounting, Shapley feature attribution,
//! selective input-level Gaussian noise, membership-inference and
//! re-identification attacks, and the experiment harness tying them together.

pub mod accountant;
pub mod attack;
pub mod attribution;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod privatizer;
pub mod rng;
pub mod serving;
pub mod trainer;

pub use error::{Error, Result};
