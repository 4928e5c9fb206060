//! Reward-tilted diffusion sampling on analytic Gaussian-mixture score models.
//!
//! The crate implements lookahead-sample reward guidance (closed-form,
//! derivative-free guidance computed from a pool of reward-annotated final
//! samples) together with the baselines it is usually compared against:
//! Taylor/Tweedie gradient guidance, sample-based repulsion (Safe-D, SR),
//! sequential Monte Carlo and best-of-N. Every quantity the guided samplers
//! approximate has an exact or quadrature oracle on a Gaussian mixture, so
//! the approximations can be measured instead of eyeballed.
//!
//! Layout:
//!
//! - [`schedule`]: variance-exploding noise schedules and time grids.
//! - [`analytic_models`]: mixtures, rewards, exact tilted oracles.
//! - [`efr`]: expected-future-reward estimators and the closed-form guidance.
//! - [`lookahead`]: pool generation and the JSON pool file.
//! - [`samplers`]: reverse-process steps for every guidance method.
//! - [`particles`]: SMC, best-of-N and their combinations.
//! - [`metrics`]: TV distance, diversity, EFR error protocol, run records.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic_models;
pub mod efr;
pub mod error;
pub mod lookahead;
pub mod metrics;
pub mod particles;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod stats;
mod vecops;

pub use error::{Error, Result};
