//! Training-free evolutionary neural architecture search.
//!
//! Candidate cells are scored at initialization with three proxies
//! (LogSynflow, linear-region expressivity and a skipped-layers ratio),
//! combined by per-run max normalization, and evolved with an ageing
//! tournament that breeds two parents per step.

pub mod autodiff;
pub mod cli;
pub mod benchio;
pub mod error;
pub mod evolve;
pub mod fitness;
pub mod metrics;
pub mod netbuilder;
pub mod searchspace;
pub mod seed;

pub use error::{Error, Result};
