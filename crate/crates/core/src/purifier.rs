//! Valid-state sets and projection of observations onto nearby valid states.
//!
//! Observations live in an [`ObservationSpace`], a superset of the MDP's
//! states (for the gridworld: every cell, walls included). An observation
//! that is not a reachable state cannot have been produced by the
//! environment, so it betrays a perturbation. [`purify`] maps any
//! observation to the `kappa_d` nearest reachable states and the agent then
//! acts pessimistically over that set.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefSet;
use crate::error::{Error, Result};
use crate::mdp::{QTable, TabularMdp, SUPPORT_EPS};
use crate::metric::StateMetric;
use crate::pessimist::maximin_action;

/// Points an agent can observe, with a metric over them and the embedding
/// of every MDP state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSpace {
    metric: StateMetric,
    state_obs: Vec<usize>,
    obs_state: Vec<Option<usize>>,
}

impl ObservationSpace {
    /// Observations are exactly the states.
    pub fn identity(metric: StateMetric) -> Self {
        let n = metric.len();
        Self {
            metric,
            state_obs: (0..n).collect(),
            obs_state: (0..n).map(Some).collect(),
        }
    }

    /// `state_obs[s]` is the observation index of state `s`; must be
    /// injective and in range of the metric.
    pub fn new(metric: StateMetric, state_obs: Vec<usize>) -> Result<Self> {
        let mut obs_state = vec![None; metric.len()];
        for (s, &o) in state_obs.iter().enumerate() {
            if o >= metric.len() {
                return Err(Error::InvalidArgument(format!(
                    "state {s} embeds at observation {o}, only {} observations",
                    metric.len()
                )));
            }
            if obs_state[o].is_some() {
                return Err(Error::InvalidArgument(format!("observation {o} embeds two states")));
            }
            obs_state[o] = Some(s);
        }
        Ok(Self {
            metric,
            state_obs,
            obs_state,
        })
    }

    pub fn metric(&self) -> &StateMetric {
        &self.metric
    }

    pub fn metric_id(&self) -> &'static str {
        self.metric.id()
    }

    pub fn num_observations(&self) -> usize {
        self.metric.len()
    }

    pub fn num_states(&self) -> usize {
        self.state_obs.len()
    }

    pub fn is_identity(&self) -> bool {
        self.state_obs.len() == self.metric.len()
            && self.state_obs.iter().enumerate().all(|(s, &o)| s == o)
    }

    #[inline]
    pub fn obs_of_state(&self, s: usize) -> usize {
        self.state_obs[s]
    }

    #[inline]
    pub fn state_of_obs(&self, o: usize) -> Option<usize> {
        self.obs_state[o]
    }

    #[inline]
    pub fn distance_to_state(&self, o: usize, s: usize) -> f64 {
        self.metric.distance(o, self.state_obs[s])
    }

    /// States within `epsilon` of observation `o`, ascending.
    pub fn states_within(&self, o: usize, epsilon: f64) -> Vec<usize> {
        (0..self.state_obs.len())
            .filter(|&s| self.distance_to_state(o, s) <= epsilon)
            .collect()
    }

    /// Observations within `epsilon` of state `s`, ascending. These are the
    /// admissible perturbations of `s`.
    pub fn observations_within(&self, s: usize, epsilon: f64) -> Vec<usize> {
        self.metric.within(self.state_obs[s], epsilon)
    }

    /// States ordered by distance to `o`, then by index.
    pub fn nearest_states(&self, o: usize, among: &[usize]) -> Vec<usize> {
        let mut ranked: Vec<(f64, usize)> = among.iter().map(|&s| (self.distance_to_state(o, s), s)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().map(|(_, s)| s).collect()
    }
}

/// States reachable from the initial states under some policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidStateSet {
    members: Vec<usize>,
    #[serde(skip)]
    mask: Vec<bool>,
}

impl ValidStateSet {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, s: usize) -> bool {
        self.mask.get(s).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Whether observation `o` is the embedding of a valid state.
    pub fn is_valid_observation(&self, space: &ObservationSpace, o: usize) -> bool {
        space.state_of_obs(o).is_some_and(|s| self.contains(s))
    }
}

/// Breadth-first closure of the initial states under every positive
/// probability transition.
pub fn valid_state_set(mdp: &TabularMdp) -> ValidStateSet {
    let n = mdp.num_states();
    let mut mask = vec![false; n];
    let mut queue = VecDeque::new();
    for &s in mdp.initial_states() {
        if !mask[s] {
            mask[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for a in 0..mdp.num_actions() {
            for (next, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p > SUPPORT_EPS && !mask[next] {
                    mask[next] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    let members = (0..n).filter(|&s| mask[s]).collect();
    ValidStateSet { members, mask }
}

/// The `kappa_d` valid states nearest to `observation`, nearest first
/// (distance ties broken by lowest state index).
pub fn purify_ranked(observation: usize, valid: &ValidStateSet, space: &ObservationSpace, kappa_d: usize) -> Result<Vec<usize>> {
    if kappa_d == 0 {
        return Err(Error::InvalidArgument("kappa_d must be at least 1".into()));
    }
    if valid.is_empty() {
        return Err(Error::InvalidArgument("valid state set is empty".into()));
    }
    if observation >= space.num_observations() {
        return Err(Error::StateOutOfRange {
            state: observation,
            num_states: space.num_observations(),
        });
    }
    let mut ranked = space.nearest_states(observation, valid.members());
    ranked.truncate(kappa_d);
    Ok(ranked)
}

/// Purified belief: the `kappa_d` valid states nearest to `observation`.
pub fn purify(observation: usize, valid: &ValidStateSet, space: &ObservationSpace, kappa_d: usize) -> Result<BeliefSet> {
    BeliefSet::new(purify_ranked(observation, valid, space, kappa_d)?)
}

/// Maximin action over the purified belief. Needs no attack budget.
pub fn purified_agent_step(
    q: &QTable,
    observation: usize,
    valid: &ValidStateSet,
    space: &ObservationSpace,
    kappa_d: usize,
) -> Result<usize> {
    let belief = purify(observation, valid, space, kappa_d)?;
    maximin_action(q, belief.members())
}
