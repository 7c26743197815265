//! Tabular bi-level reinforcement learning: exact oracles, penalty-based
//! stochastic operators, a single-loop actor-critic with attenuating entropy
//! regularization, baselines, environments and an experiment harness.

pub mod actor_critic;
pub mod baselines;
pub mod env;
pub mod error;
pub mod fd;
pub mod harness;
pub mod instances;
pub mod mdp;
pub mod objective;
pub mod operators;
pub mod oracles;
pub mod policy;
pub mod schedule;

pub use error::{Error, Result};

/// Random number generator used for every simulated draw.
pub type SimRng = rand_chacha::ChaCha8Rng;
