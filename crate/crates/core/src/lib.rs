//! Online control of known linear systems with disturbance-action policies:
//! dynamics and costs, stability certificates, policies and projections,
//! surrogate costs with their exact second moments, spectral checks, and the
//! OGD / natural-gradient learners.

// NaN must fail parameter checks, so `!(x > 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lds;
pub mod learners;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod spectral;
pub mod stability;
pub mod surrogate;

pub use error::{Error, Result, StabilityFailure};
