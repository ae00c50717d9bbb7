//! Environment and fixture construction.

mod counterexample;
mod gridworld;
mod random;

pub use counterexample::{counterexample_fixture, CounterexampleFixture};
pub use gridworld::{build_gridworld, default_gridworld, Cell, Gridworld, GridworldSpec, ACTION_NAMES, DEFAULT_GRIDWORLD};
pub use random::{random_mdp, RandomMdpSpec};
