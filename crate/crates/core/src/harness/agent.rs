use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefTracker;
use crate::envs::Gridworld;
use crate::error::{Error, Result};
use crate::mdp::{DetPolicy, QTable, TabularMdp};
use crate::metric::StateMetric;
use crate::pessimist::{decision_set, maximin_action, worst_case_scores};
use crate::purifier::{purify_ranked, valid_state_set, ObservationSpace, ValidStateSet};

/// An environment as the harness sees it: dynamics, the observation space
/// attackers and agents share, and the valid-state set.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub mdp: TabularMdp,
    /// Metric on states, used for training.
    pub state_metric: StateMetric,
    pub space: ObservationSpace,
    pub valid: ValidStateSet,
    pub horizon: usize,
}

impl Scenario {
    /// Observations are the states themselves.
    pub fn from_mdp(name: &str, mdp: TabularMdp, metric: StateMetric, horizon: usize) -> Result<Self> {
        if metric.len() != mdp.num_states() {
            return Err(Error::InvalidArgument("metric must cover the state space".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        let valid = valid_state_set(&mdp);
        Ok(Self {
            name: name.into(),
            space: ObservationSpace::identity(metric.clone()),
            state_metric: metric,
            valid,
            mdp,
            horizon,
        })
    }

    /// Observations are all grid cells, walls included.
    pub fn from_gridworld(name: &str, grid: &Gridworld) -> Self {
        Self {
            name: name.into(),
            state_metric: grid.state_metric(),
            space: grid.observations.clone(),
            valid: valid_state_set(&grid.mdp),
            mdp: grid.mdp.clone(),
            horizon: grid.spec.horizon,
        }
    }

    /// Observation space restricted to state observations, indexed by state.
    pub fn state_space(&self) -> ObservationSpace {
        ObservationSpace::identity(self.state_metric.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Greedy on the unattacked optimum, trusting every observation.
    VanillaGreedy,
    /// Maximin over the ball around the observation.
    BallPessimist,
    /// Maximin over the exact belief set.
    BeliefPessimist,
    /// Maximin over the nearest valid states to the observation.
    PurifiedPessimist,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [
        AgentKind::VanillaGreedy,
        AgentKind::BallPessimist,
        AgentKind::BeliefPessimist,
        AgentKind::PurifiedPessimist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::VanillaGreedy => "vanilla-greedy",
            AgentKind::BallPessimist => "ball-pessimist",
            AgentKind::BeliefPessimist => "belief-pessimist",
            AgentKind::PurifiedPessimist => "purified-pessimist",
        }
    }

    /// Whether the agent's table comes from pessimistic training.
    pub fn is_pessimistic(self) -> bool {
        self != AgentKind::VanillaGreedy
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown agent `{s}`")))
    }
}

/// A trained agent: its table and the stationary decision rule it applies
/// to single observations.
///
/// For the belief agent the stationary rule is the ball rule; it is what
/// attackers plan against; the agent itself acts on its belief.
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub kind: AgentKind,
    /// Budget the agent assumes.
    pub epsilon: f64,
    pub q: QTable,
    pub kappa_d: usize,
    /// States considered possible for each observation.
    candidates: Vec<Vec<usize>>,
    policy: DetPolicy,
    scores: QTable,
}

impl AgentModel {
    pub fn new(kind: AgentKind, q: QTable, epsilon: f64, kappa_d: usize, scenario: &Scenario) -> Result<Self> {
        let space = &scenario.space;
        let mdp = &scenario.mdp;
        if q.num_states() != scenario.mdp.num_states() || q.num_actions() != scenario.mdp.num_actions() {
            return Err(Error::InvalidArgument("agent table does not match the MDP".into()));
        }
        if epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        let all_states: Vec<usize> = (0..space.num_states()).collect();
        let candidates = (0..space.num_observations())
            .map(|o| {
                let set = match kind {
                    AgentKind::VanillaGreedy => space.state_of_obs(o).map(|s| vec![s]).unwrap_or_default(),
                    AgentKind::BallPessimist | AgentKind::BeliefPessimist => decision_set(mdp, space.states_within(o, epsilon)),
                    AgentKind::PurifiedPessimist => decision_set(mdp, purify_ranked(o, &scenario.valid, space, kappa_d)?),
                };
                Ok(if set.is_empty() { nearest_set(space, o, &all_states) } else { set })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut actions = Vec::with_capacity(candidates.len());
        let mut score_rows = Vec::with_capacity(candidates.len());
        for set in &candidates {
            let row = worst_case_scores(&q, set);
            actions.push(maximin_action(&q, set)?);
            score_rows.push(row);
        }
        Ok(Self {
            kind,
            epsilon,
            kappa_d,
            policy: DetPolicy::new(actions, q.num_actions())?,
            scores: QTable::from_rows(score_rows)?,
            candidates,
            q,
        })
    }

    /// Observation -> action under the stationary rule.
    pub fn policy(&self) -> &DetPolicy {
        &self.policy
    }

    /// Per-observation action scores under the stationary rule.
    pub fn scores(&self) -> &QTable {
        &self.scores
    }

    pub fn candidates(&self, observed: usize) -> &[usize] {
        &self.candidates[observed]
    }

    pub fn start_episode(&self) -> AgentRun<'_> {
        AgentRun {
            model: self,
            tracker: (self.kind == AgentKind::BeliefPessimist).then(|| BeliefTracker::new(self.epsilon)),
            carried_fallbacks: 0,
        }
    }
}

// States at minimum distance from an observation no candidate set covers.
fn nearest_set(space: &ObservationSpace, o: usize, states: &[usize]) -> Vec<usize> {
    let ranked = space.nearest_states(o, states);
    let best = space.distance_to_state(o, ranked[0]);
    ranked.into_iter().take_while(|&s| space.distance_to_state(o, s) == best).collect()
}

/// Per-episode agent state.
#[derive(Debug)]
pub struct AgentRun<'a> {
    model: &'a AgentModel,
    tracker: Option<BeliefTracker>,
    carried_fallbacks: usize,
}

impl AgentRun<'_> {
    /// Picks an action for an observation; returns it with the set of states
    /// the agent considered.
    pub fn act(&mut self, mdp: &TabularMdp, space: &ObservationSpace, observed: usize) -> Result<(usize, Vec<usize>)> {
        if observed >= space.num_observations() {
            return Err(Error::StateOutOfRange {
                state: observed,
                num_states: space.num_observations(),
            });
        }
        match &mut self.tracker {
            // an observation farther than the assumed budget from every
            // state: act on the nearest states and start tracking afresh
            Some(tracker) if space.states_within(observed, self.model.epsilon).is_empty() => {
                self.carried_fallbacks += tracker.fallbacks();
                tracker.reset();
                let belief = self.model.candidates[observed].clone();
                Ok((self.model.policy.action(observed), belief))
            }
            Some(tracker) => {
                let belief = tracker.observe(mdp, space, observed)?.members().to_vec();
                let action = maximin_action(&self.model.q, &belief)?;
                tracker.record_action(action);
                Ok((action, belief))
            }
            None => Ok((self.model.policy.action(observed), self.model.candidates[observed].clone())),
        }
    }

    /// Times the belief intersection came up empty this episode.
    pub fn fallbacks(&self) -> usize {
        self.carried_fallbacks + self.tracker.as_ref().map_or(0, BeliefTracker::fallbacks)
    }
}
