//! Incremental actor-critic learning with action value gradients.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: multilayer perceptrons with exact reverse-mode gradients and Adam.
//! - [`dist`]: normal and tanh-squashed normal policy distributions.
//! - [`norm`]: Welford observation normalization and TD-error scaling.
//! - [`env`]: built-in continuous-control tasks and a line-delimited JSON
//!   protocol for external simulators.
//! - [`agents`]: AVG, AVG with a target critic, IAC and SAC-1, each updating
//!   from one transition at a time.
//! - [`harness`]: seeded training loop, metric logs and checkpoints.
//! - [`sweep`]: random hyperparameter search with divergence filtering.
//! - [`lintest`]: a small-MDP testbed for a linear compatible critic.

pub mod agents;
pub mod dist;
pub mod env;
pub mod harness;
pub mod lintest;
pub mod nn;
pub mod norm;
pub mod sweep;
