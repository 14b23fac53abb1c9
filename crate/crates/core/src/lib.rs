//! Simulation-backed active learning of stacking-plan feasibility.
//!
//! The crate is organized around the phases of the system:
//!
//! - [`domain`] — block geometry, the analytic constructability oracle,
//!   placement noise, simulated plan execution, and task rewards.
//! - [`model`] — graph-network feasibility models (`Tgn` / `Fcgn`
//!   connectivity), exact backpropagation, and ensemble training.
//! - [`acquisition`] — entropy / information-gain scoring and the pool
//!   sampling strategies used to pick the next experiments.
//! - [`learner`] — the experimentation loop: generate, score, execute,
//!   retrain, log.
//! - [`planner`] — the evaluation phase: Monte-Carlo planning against a
//!   feasibility model and normalized-regret measurement.
//! - [`cli`] — configuration files, subcommand drivers, and result export.

pub mod acquisition;
pub mod cli;
pub mod domain;
pub mod learner;
pub mod model;
pub mod planner;
