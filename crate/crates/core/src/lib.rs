//! Belief-space constrained model-predictive signal control for a single
//! intersection observed through a noisy vision-like sensor.

pub mod belief;
pub mod controller;
pub mod evalkit;
pub mod harness;
pub mod error;
pub mod microsim;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod safety;
pub mod sensor;

pub use error::{Error, Result};
