//! Exact set-valued belief tracking over the true state.
//!
//! Starting from `M_0 = B_eps(obs_0)`, each step pushes the belief through
//! the support of the chosen action and intersects it with the ball around
//! the next observation. Under an admissible attacker and an exact model the
//! true state never leaves the belief.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{QTable, TabularMdp, SUPPORT_EPS};
use crate::pessimist::{decision_set, maximin_action};
use crate::purifier::ObservationSpace;

/// Nonempty set of states, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefSet {
    members: Vec<usize>,
}

impl BeliefSet {
    pub fn new(mut members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyBelief);
        }
        members.sort_unstable();
        members.dedup();
        Ok(Self { members })
    }

    pub fn singleton(s: usize) -> Self {
        Self { members: vec![s] }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, s: usize) -> bool {
        self.members.binary_search(&s).is_ok()
    }

    pub fn is_subset_of(&self, other: &[usize]) -> bool {
        self.members.iter().all(|s| other.binary_search(s).is_ok())
    }
}

impl AsRef<[usize]> for BeliefSet {
    fn as_ref(&self) -> &[usize] {
        &self.members
    }
}

/// `M_0 = B_eps(observed)`: the states within `epsilon` of the first
/// observation.
pub fn initial_belief(observed: usize, epsilon: f64, space: &ObservationSpace) -> Result<BeliefSet> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    BeliefSet::new(space.states_within(observed, epsilon))
}

/// One-step forward image `{s' : exists s in belief, P(s'|s,a) > 0}`.
pub fn propagate_belief(mdp: &TabularMdp, belief: &BeliefSet, action: usize) -> Result<Vec<usize>> {
    if action >= mdp.num_actions() {
        return Err(Error::ActionOutOfRange {
            action,
            num_actions: mdp.num_actions(),
        });
    }
    let mut hit = vec![false; mdp.num_states()];
    for &s in belief.members() {
        mdp.check_state(s)?;
        for (next, &p) in mdp.transition_row(s, action).iter().enumerate() {
            if p > SUPPORT_EPS {
                hit[next] = true;
            }
        }
    }
    Ok((0..hit.len()).filter(|&s| hit[s]).collect())
}

/// Result of intersecting a propagated belief with the next observation's
/// ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefUpdate {
    pub belief: BeliefSet,
    /// Set when the intersection was empty and the belief was reset to the
    /// observation's ball.
    pub fallback: bool,
}

/// `M_{t+1} = M'_t ∩ B_eps(observed)`, or `B_eps(observed)` with the
/// fallback flag raised when the intersection is empty.
pub fn intersect_belief(
    propagated: &[usize],
    observed: usize,
    epsilon: f64,
    space: &ObservationSpace,
) -> Result<BeliefUpdate> {
    if propagated.is_empty() {
        return Err(Error::EmptyBelief);
    }
    let ball = space.states_within(observed, epsilon);
    let both: Vec<usize> = ball
        .iter()
        .copied()
        .filter(|s| propagated.binary_search(s).is_ok())
        .collect();
    if both.is_empty() {
        Ok(BeliefUpdate {
            belief: BeliefSet::new(ball)?,
            fallback: true,
        })
    } else {
        Ok(BeliefUpdate {
            belief: BeliefSet { members: both },
            fallback: false,
        })
    }
}

/// Maximin action over the current belief.
pub fn belief_agent_step(q: &QTable, belief: &BeliefSet) -> Result<usize> {
    maximin_action(q, belief.members())
}

/// Single-trajectory belief tracker.
///
/// Call [`observe`](Self::observe) with each observation and
/// [`record_action`](Self::record_action) with each action taken.
///
/// The tracker is meant for a running episode: terminal states are dropped
/// from the belief whenever something else remains, since an agent is never
/// asked to act in one.
#[derive(Debug, Clone)]
pub struct BeliefTracker {
    epsilon: f64,
    current: Option<BeliefSet>,
    last_action: Option<usize>,
    fallbacks: usize,
    history: Vec<BeliefSet>,
}

impl BeliefTracker {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            current: None,
            last_action: None,
            fallbacks: 0,
            history: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.current = None;
        self.last_action = None;
        self.fallbacks = 0;
        self.history.clear();
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Folds in the next observation and returns the updated belief.
    pub fn observe(&mut self, mdp: &TabularMdp, space: &ObservationSpace, observed: usize) -> Result<&BeliefSet> {
        let next = match (&self.current, self.last_action) {
            (Some(belief), Some(action)) => {
                let propagated = decision_set(mdp, propagate_belief(mdp, belief, action)?);
                let update = intersect_belief(&propagated, observed, self.epsilon, space)?;
                if update.fallback {
                    self.fallbacks += 1;
                }
                update.belief
            }
            _ => {
                let ball = initial_belief(observed, self.epsilon, space)?;
                BeliefSet::new(decision_set(mdp, ball.members().to_vec()))?
            }
        };
        self.history.push(next.clone());
        self.last_action = None;
        Ok(self.current.insert(next))
    }

    pub fn record_action(&mut self, action: usize) {
        self.last_action = Some(action);
    }

    pub fn belief(&self) -> Option<&BeliefSet> {
        self.current.as_ref()
    }

    /// Number of times the empty-intersection fallback fired.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    pub fn history(&self) -> &[BeliefSet] {
        &self.history
    }
}
