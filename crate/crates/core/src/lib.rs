//! Numerical solvers for coupled mean-field forward-backward SDEs by the
//! method of continuation, with condition verifiers and a mean-field
//! linear-quadratic control layer.
//!
//! Everything runs on a finite time grid over a scenario [`noise::Backend`]:
//! an exact binomial tree or a seeded Monte-Carlo ensemble.

pub mod backward;
pub mod conditions;
pub mod continuation;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod lq;
pub mod model;
pub mod noise;
pub mod par;

pub use error::{Error, Result};

/// Version of this library, echoed into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
