//! Budget-constrained subsidy control for a ride-hailing marketplace.
//!
//! Per-pair subsidies come from a dual decomposition: one multiplier per
//! window maps every (order, driver) pair to a subsidy in closed form. The
//! multiplier itself is chosen by a conditional diffusion planner over market
//! trajectories followed by an inverse-dynamics decoder.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod config;
pub mod controller;
pub mod dataset;
pub mod diffusion;
pub mod dual_map;
pub mod error;
pub mod eval;
pub mod market;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod train;
pub mod trajectory;
pub mod types;

pub use error::{Error, Result};
