//! Data-free distillation of tabular classifiers.
//!
//! A student network learns to mimic a black-box teacher from synthetic
//! queries only. Queries come from a generator that is trained to spread its
//! samples over every pair of per-feature bins, where the bins are learned so
//! that their edges sit on the teacher's decision boundaries.

pub mod binning;
pub mod coverage;
pub mod data;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod report;
pub mod teachers;
pub mod student;
pub mod tensor;

pub use error::{Error, Result};
