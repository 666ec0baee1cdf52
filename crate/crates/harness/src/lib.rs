//! Experiment runner, comparators and verification suite for online control
//! with disturbance-action policies.

pub mod comparators;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod sufficiency;
pub mod verify;

pub use error::{HarnessError, Result};
