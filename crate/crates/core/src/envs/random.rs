use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Parameters of a seeded random MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    /// Successors per `(s, a)`.
    pub branching: usize,
    pub reward_low: f64,
    pub reward_high: f64,
    pub seed: u64,
}

impl RandomMdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::InvalidArgument("random MDP needs states and actions".into()));
        }
        if self.branching == 0 || self.branching > self.num_states {
            return Err(Error::InvalidArgument(format!(
                "branching {} must be in 1..={}",
                self.branching, self.num_states
            )));
        }
        if !(self.reward_low <= self.reward_high) {
            return Err(Error::InvalidArgument("reward_low must not exceed reward_high".into()));
        }
        Ok(())
    }
}

/// Draws an MDP with uniformly chosen successor sets, uniform random weights
/// on them and uniform rewards. Every state is initial; none is terminal.
pub fn random_mdp(spec: &RandomMdpSpec, discount: f64) -> Result<TabularMdp> {
    spec.validate()?;
    let (ns, na) = (spec.num_states, spec.num_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let base = (s * na + a) * ns;
            let succ = sample(&mut rng, ns, spec.branching).into_vec();
            let weights: Vec<f64> = succ.iter().map(|_| 1.0 - rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum();
            for (&next, w) in succ.iter().zip(&weights) {
                transition[base + next] = w / total;
            }
            reward.push(if spec.reward_low == spec.reward_high {
                spec.reward_low
            } else {
                rng.random_range(spec.reward_low..spec.reward_high)
            });
        }
    }
    TabularMdp::from_flat(ns, na, transition, reward, discount)
}
