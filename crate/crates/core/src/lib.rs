//! Tabular robust reinforcement learning under adversarial state perturbations.
//!
//! The crate covers exact and sampled pessimistic Q-iteration, best-response,
//! MinBest and optimal observation attackers, exact belief tracking over the
//! set of states consistent with a perturbed observation history, nearest
//! valid-state purification, and an evaluation harness that pits agents
//! against attackers on seeded episodes.

pub mod adversary;
pub mod belief;
pub mod envs;
pub mod error;
pub mod harness;
pub mod io;
pub mod mdp;
pub mod metric;
pub mod pessimist;
pub mod purifier;

pub use error::{Error, Result};
pub use mdp::{DetPolicy, QTable, StateValue, TabularMdp};
pub use metric::{MetricKind, StateMetric};
