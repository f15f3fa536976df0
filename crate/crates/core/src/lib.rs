//! Continuous-variable QKD toolkit: Gaussian-state algebra, state preparation,
//! Gaussian channels and the entangling-cloner attack, closed-form key rates,
//! a seeded Monte Carlo harness, and binary key distillation.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod preparation;
pub mod reconciliation;
pub mod rng;
pub mod security;

pub use error::{Error, Result};
pub use gaussian::{Conditional, EmpiricalConditional, GaussianEnsemble, Quadrature, SampleBatch, ShotNoise};
