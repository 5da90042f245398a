//! Online self-supervised traversability mapping.
//!
//! The crate turns per-observation feature embeddings into robot-centered
//! bird's-eye-view (BEV) cost and speed maps that adapt within seconds of
//! driving experience. The pipeline:
//!
//! 1. [`feature_space`] compresses embeddings into VLAD descriptors over a
//!    fitted cluster set and scores out-of-distribution terrain.
//! 2. [`proprio`] converts vibration time-series into a scalar roughness
//!    via weighted bandpowers, with parameters fit to scored annotations.
//! 3. [`bev`] fuses per-cell descriptor observations into a rolling local
//!    grid and cleans the OOD mask morphologically.
//! 4. [`buffer`] stores (descriptor, speed, roughness) experience with
//!    semantically balanced eviction and permanent pinned labels.
//! 5. [`estimator`] regresses cost and speed with exact Gaussian processes,
//!    applies CVaR risk shaping, and adapts the speed-risk level online.
//! 6. [`planner`] runs an MPPI controller over the rasterized maps.
//! 7. [`sim`] closes the loop with a synthetic world, sensor, and
//!    proprioception generator for desk-scale experiments.

pub mod bev;
pub mod buffer;
pub mod config;
pub mod error;
pub mod estimator;
pub mod feature_space;
pub mod planner;
pub mod proprio;
pub mod seeds;
pub mod sim;

mod optim;

pub use error::{Error, Result};
