//! Data-efficient Bayesian optimization of the two-parameter light-field
//! controller used to drive soft microrobots.
//!
//! The crate is organised around the optimisation loop:
//!
//! * [`gp`] – Gaussian-process regression with a constant mean, five ARD
//!   kernels and MAP hyperparameter estimation.
//! * [`acquisition`] – PI, EI and a representer-point entropy search, plus
//!   the grid + simplex maximiser used to pick the next controller.
//! * [`bo`] – the ask/tell driver with run logs.
//! * [`velocity`] – speed estimation from tracked positions and the
//!   speed-deviation cost.
//! * [`sim`] – the striped light pattern and a simulated plant.
//! * [`benchgen`] – semi-synthetic cost surfaces built from grid data.
//! * [`harness`] – the regret benchmark runner and report writers.

pub mod acquisition;
pub mod benchgen;
pub mod bo;
pub mod config;
pub mod error;
pub mod gp;
pub mod harness;
pub mod params;
pub mod search;
pub mod seed;
pub mod sim;
pub mod velocity;

pub use error::{Error, Result};
pub use params::ControllerParams;
