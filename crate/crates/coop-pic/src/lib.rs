//! Cooperative path-integral control for networked stochastic multi-agent
//! systems.
//!
//! Each agent plans over its factorial subsystem (itself plus its graph
//! neighbors): passive rollouts of the joint dynamics are sampled every
//! control cycle, scored by generalized path values, and combined through
//! the optimal path distribution into a joint control estimate, of which
//! the agent applies only its own component before the horizon recedes.
//!
//! The crate splits into the network/dynamics/cost primitives, the sampler
//! and scorer, the closed-loop runner, scenario and results I/O, and the
//! validation oracles that pin the scoring math against analytic and
//! brute-force references.

pub mod checks;
pub mod costs;
pub mod dynamics;
pub mod error;
pub mod network;
pub mod output;
pub mod pic;
pub mod runner;
pub mod sampler;
pub mod scenario;
pub mod seed;
pub mod validation;

pub use error::{Error, Result};
pub use network::{CommGraph, Subsystem};
pub use runner::{run_trial, run_trials, Problem, TrialResult};
pub use scenario::Scenario;
