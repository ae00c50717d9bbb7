//! Exact state-perturbation adversaries.
//!
//! Three attackers are provided:
//!
//! * [`best_response_attack`] perturbs each state to the admissible
//!   observation that minimizes the victim's one-step Q-value.
//! * [`minbest_attack`] minimizes the softmax probability of the victim's
//!   best action.
//! * [`optimal_attack`] solves the attacker's own MDP (states are the
//!   victim's true states, actions are admissible observations, rewards are
//!   negated victim rewards) and so minimizes the victim's discounted return
//!   from every state at once.
//!
//! Each attacker has a `*_obs` variant working over an [`ObservationSpace`]
//! larger than the state space, which lets it emit observations that are not
//! states at all (wall cells on a gridworld).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{argmax, argmin, evaluate_actions, greedy_admissible, value_iteration, DetPolicy, QTable, TabularMdp};
use crate::metric::StateMetric;
use crate::purifier::ObservationSpace;

/// Default MinBest softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Perturbation `omega`: true state -> observation, with the budget and the
/// metric it is admissible under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMap {
    perturb: Vec<usize>,
    epsilon: f64,
    metric_id: String,
}

impl AttackMap {
    /// No perturbation.
    pub fn identity(num_states: usize) -> Self {
        Self {
            perturb: (0..num_states).collect(),
            epsilon: 0.0,
            metric_id: "any".into(),
        }
    }

    /// Builds a map and checks `d(s, perturb(s)) <= epsilon` for every state.
    pub fn new(perturb: Vec<usize>, epsilon: f64, space: &ObservationSpace) -> Result<Self> {
        let map = Self {
            perturb,
            epsilon,
            metric_id: space.metric_id().into(),
        };
        map.check_admissible(space)?;
        Ok(map)
    }

    /// Builds a map without checking admissibility.
    pub fn unchecked(perturb: Vec<usize>, epsilon: f64, metric_id: &str) -> Self {
        Self {
            perturb,
            epsilon,
            metric_id: metric_id.into(),
        }
    }

    pub fn check_admissible(&self, space: &ObservationSpace) -> Result<()> {
        if self.perturb.len() != space.num_states() {
            return Err(Error::InvalidArgument(format!(
                "attack map covers {} states, space has {}",
                self.perturb.len(),
                space.num_states()
            )));
        }
        for (s, &o) in self.perturb.iter().enumerate() {
            if o >= space.num_observations() {
                return Err(Error::StateOutOfRange {
                    state: o,
                    num_states: space.num_observations(),
                });
            }
            let distance = space.distance_to_state(o, s);
            if distance > self.epsilon {
                return Err(Error::Inadmissible {
                    state: s,
                    distance,
                    epsilon: self.epsilon,
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn observed(&self, s: usize) -> usize {
        self.perturb[s]
    }

    pub fn len(&self) -> usize {
        self.perturb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perturb.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn metric_id(&self) -> &str {
        &self.metric_id
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perturb
    }

    /// Number of states whose observation differs from the state itself.
    pub fn num_perturbed(&self, space: &ObservationSpace) -> usize {
        (0..self.perturb.len())
            .filter(|&s| self.perturb[s] != space.obs_of_state(s))
            .count()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("attack maps always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("attack map: {e}")))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")))
    }
}

fn admissible_sets(space: &ObservationSpace, epsilon: f64) -> Vec<Vec<usize>> {
    (0..space.num_states())
        .map(|s| space.observations_within(s, epsilon))
        .collect()
}

/// `omega(s) = argmin_{s~ in B_eps(s)} q[s][pi(s~)]`, lowest state on ties.
pub fn best_response_attack(q: &QTable, pi: &DetPolicy, epsilon: f64, metric: &StateMetric, mdp: &TabularMdp) -> Result<AttackMap> {
    check_epsilon(epsilon)?;
    if metric.len() != mdp.num_states() || pi.len() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric and policy must cover the state space".into()));
    }
    let perturb = (0..mdp.num_states())
        .map(|s| {
            let ball = metric.within(s, epsilon);
            argmin(ball.into_iter().map(|o| (o, q.get(s, pi.action(o)))))
        })
        .collect();
    Ok(AttackMap::unchecked(perturb, epsilon, metric.id()))
}

/// Best response over an observation space; `pi` maps observations to
/// actions.
pub fn best_response_attack_obs(q: &QTable, pi: &DetPolicy, epsilon: f64, space: &ObservationSpace) -> Result<AttackMap> {
    check_epsilon(epsilon)?;
    if pi.len() != space.num_observations() {
        return Err(Error::InvalidArgument("policy must cover every observation".into()));
    }
    let perturb = (0..space.num_states())
        .map(|s| {
            let candidates = space.observations_within(s, epsilon);
            argmin(candidates.into_iter().map(|o| (o, q.get(s, pi.action(o)))))
        })
        .collect();
    Ok(AttackMap::unchecked(perturb, epsilon, space.metric_id()))
}

/// Probability of action `a` under `softmax(row / temperature)`.
pub fn softmax_prob(row: &[f64], a: usize, temperature: f64) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| ((v - max) / temperature).exp()).sum();
    ((row[a] - max) / temperature).exp() / total
}

fn minbest_core(
    scores: &QTable,
    epsilon: f64,
    temperature: f64,
    space: &ObservationSpace,
) -> Result<AttackMap> {
    check_epsilon(epsilon)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let perturb = (0..space.num_states())
        .map(|s| {
            let home = space.obs_of_state(s);
            let best = argmax(scores.row(home).iter().copied().enumerate());
            let home_prob = softmax_prob(scores.row(home), best, temperature);
            let candidates = space.observations_within(s, epsilon);
            let pick = argmin(
                candidates
                    .iter()
                    .map(|&o| (o, softmax_prob(scores.row(o), best, temperature))),
            );
            // only move when it strictly lowers the best action's probability
            if softmax_prob(scores.row(pick), best, temperature) < home_prob {
                pick
            } else {
                home
            }
        })
        .collect();
    Ok(AttackMap::unchecked(perturb, epsilon, space.metric_id()))
}

/// MinBest: for each `s`, with `a* = argmax_a q[s][a]`, perturb to the
/// `s~ in B_eps(s)` minimizing `softmax(q[s~]/temperature)[a*]`. The state
/// is left unperturbed unless some candidate strictly lowers that
/// probability; remaining ties go to the lowest index.
pub fn minbest_attack(q: &QTable, epsilon: f64, metric: &StateMetric, mdp: &TabularMdp, temperature: f64) -> Result<AttackMap> {
    if metric.len() != mdp.num_states() || q.num_states() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric and Q table must cover the state space".into()));
    }
    minbest_core(q, epsilon, temperature, &ObservationSpace::identity(metric.clone()))
}

/// MinBest over an observation space. `scores` has one row per observation:
/// the victim's action scores when it sees that observation.
pub fn minbest_attack_obs(scores: &QTable, epsilon: f64, space: &ObservationSpace, temperature: f64) -> Result<AttackMap> {
    if scores.num_states() != space.num_observations() {
        return Err(Error::InvalidArgument("score table must cover every observation".into()));
    }
    minbest_core(scores, epsilon, temperature, space)
}

/// The attacker's MDP against a fixed deterministic victim policy.
///
/// States are the victim's states; action `s~` is "show observation `s~`".
/// Only observations in `B_eps(s)` are admissible at `s`. For admissible
/// `s~`: `P~(s'|s,s~) = P(s'|s,pi(s~))`, `R~(s,s~) = -R(s,pi(s~))`.
/// Inadmissible entries copy the unperturbed action so the table stays a
/// valid MDP; they are never selected.
pub fn attacker_mdp(mdp: &TabularMdp, pi: &DetPolicy, epsilon: f64, metric: &StateMetric) -> Result<TabularMdp> {
    if metric.len() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric must cover the state space".into()));
    }
    attacker_mdp_obs(mdp, pi, epsilon, &ObservationSpace::identity(metric.clone()))
}

/// Attacker MDP whose actions are observations of `space`.
pub fn attacker_mdp_obs(mdp: &TabularMdp, pi: &DetPolicy, epsilon: f64, space: &ObservationSpace) -> Result<TabularMdp> {
    check_epsilon(epsilon)?;
    let ns = mdp.num_states();
    let no = space.num_observations();
    if space.num_states() != ns {
        return Err(Error::InvalidArgument("observation space does not match the MDP".into()));
    }
    if pi.len() != no {
        return Err(Error::InvalidArgument(format!(
            "policy covers {} observations, space has {no}",
            pi.len()
        )));
    }
    if let Some(&a) = pi.as_slice().iter().find(|&&a| a >= mdp.num_actions()) {
        return Err(Error::ActionOutOfRange {
            action: a,
            num_actions: mdp.num_actions(),
        });
    }
    let sets = admissible_sets(space, epsilon);
    let mut transition = Vec::with_capacity(ns * no * ns);
    let mut reward = Vec::with_capacity(ns * no);
    for (s, set) in sets.iter().enumerate() {
        let home_action = pi.action(space.obs_of_state(s));
        for o in 0..no {
            let a = if set.binary_search(&o).is_ok() {
                pi.action(o)
            } else {
                home_action
            };
            transition.extend_from_slice(mdp.transition_row(s, a));
            reward.push(-mdp.reward(s, a));
        }
    }
    TabularMdp::from_flat(ns, no, transition, reward, mdp.discount())?
        .with_initial_states(mdp.initial_states().to_vec())?
        .with_terminal_states(mdp.terminal_states())?
        .with_admissible_actions(sets)
}

/// Tolerance near the floating-point floor for the MDP's value scale.
pub(crate) fn fine_tol(mdp: &TabularMdp) -> f64 {
    let mut r_abs: f64 = 0.0;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            r_abs = r_abs.max(mdp.reward(s, a).abs());
        }
    }
    1e-13 * (1.0 + r_abs / (1.0 - mdp.discount()))
}

/// Optimal admissible attack against `pi`: minimizes `V_{pi∘omega}(s)` at
/// every state simultaneously.
pub fn optimal_attack(mdp: &TabularMdp, pi: &DetPolicy, epsilon: f64, metric: &StateMetric, tol: f64) -> Result<AttackMap> {
    if metric.len() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric must cover the state space".into()));
    }
    optimal_attack_obs(mdp, pi, epsilon, &ObservationSpace::identity(metric.clone()), tol)
}

/// Optimal attack over an observation space.
pub fn optimal_attack_obs(mdp: &TabularMdp, pi: &DetPolicy, epsilon: f64, space: &ObservationSpace, tol: f64) -> Result<AttackMap> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let att = attacker_mdp_obs(mdp, pi, epsilon, space)?;
    let gamma = att.discount();
    let fine = fine_tol(&att);
    let vi_tol = (tol * (1.0 - gamma)).min(1e-10).max(fine);
    let q = value_iteration(&att, vi_tol, 1_000_000)?;
    let mut choice: Vec<usize> = greedy_admissible(&att, &q).as_slice().to_vec();

    // Policy-iteration polish: removes the residual suboptimality of the
    // greedy map extracted from an approximate fixed point.
    for _ in 0..100 {
        let v = evaluate_actions(&att, &choice, fine)?;
        let mut changed = false;
        for s in 0..att.num_states() {
            let value_of = |o: usize| {
                let cont = att.expected(s, o, &v);
                att.reward(s, o) + gamma * cont
            };
            let current = value_of(choice[s]);
            let best = argmax(att.admissible_actions(s).iter().map(|&o| (o, value_of(o))));
            let margin = 1e-12 * (1.0 + current.abs());
            if value_of(best) > current + margin {
                choice[s] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    AttackMap::new(choice, epsilon, space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{evaluate_policy_q, state_value};

    fn two_state() -> TabularMdp {
        // state 0: action 0 pays 1, action 1 pays 0; state 1: opposite
        TabularMdp::new(
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let mdp = two_state();
        let m = StateMetric::discrete(2);
        let q = QTable::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pi = DetPolicy::new(vec![0, 1], 2).unwrap();
        assert_eq!(best_response_attack(&q, &pi, 0.0, &m, &mdp).unwrap().as_slice(), &[0, 1]);
        assert_eq!(minbest_attack(&q, 0.0, &m, &mdp, 1.0).unwrap().as_slice(), &[0, 1]);
        assert_eq!(optimal_attack(&mdp, &pi, 0.0, &m, 1e-9).unwrap().as_slice(), &[0, 1]);
    }

    #[test]
    fn full_budget_swaps_observations() {
        let mdp = two_state();
        let m = StateMetric::discrete(2);
        let q = QTable::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let pi = DetPolicy::new(vec![0, 1], 2).unwrap();
        let br = best_response_attack(&q, &pi, 1.0, &m, &mdp).unwrap();
        assert_eq!(br.as_slice(), &[1, 0]);
        let opt = optimal_attack(&mdp, &pi, 1.0, &m, 1e-9).unwrap();
        assert_eq!(opt.as_slice(), &[1, 0]);
        let v = state_value(&evaluate_policy_q(&mdp, &pi, &opt, 1e-12).unwrap(), &pi, &opt);
        assert!(v.values.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn identical_rows_leave_minbest_idle() {
        let mdp = two_state();
        let q = QTable::from_rows(vec![vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap();
        let omega = minbest_attack(&q, 1.0, &StateMetric::discrete(2), &mdp, 1.0).unwrap();
        assert_eq!(omega.as_slice(), &[0, 1]);
    }

    #[test]
    fn attacker_mdp_negates_rewards() {
        let mdp = two_state();
        let pi = DetPolicy::constant(2, 0);
        let att = attacker_mdp(&mdp, &pi, 1.0, &StateMetric::discrete(2)).unwrap();
        assert_eq!(att.num_actions(), 2);
        for s in 0..2 {
            for o in 0..2 {
                assert_eq!(att.reward(s, o), -mdp.reward(s, 0));
            }
        }
        let att0 = attacker_mdp(&mdp, &pi, 0.0, &StateMetric::discrete(2)).unwrap();
        assert_eq!(att0.admissible_actions(1), &[1]);
    }

    #[test]
    fn attack_map_admissibility_checked() {
        let space = ObservationSpace::identity(StateMetric::chebyshev(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap());
        assert!(AttackMap::new(vec![1, 0, 2], 1.0, &space).is_ok());
        assert!(matches!(
            AttackMap::new(vec![2, 1, 2], 1.0, &space),
            Err(Error::Inadmissible { state: 0, .. })
        ));
    }

    #[test]
    fn attack_map_toml_round_trip() {
        let omega = AttackMap::unchecked(vec![2, 0, 1], 1.5, "linf");
        assert_eq!(AttackMap::from_toml(&omega.to_toml()).unwrap(), omega);
    }

    #[test]
    fn softmax_probabilities() {
        let p = softmax_prob(&[0.0, 0.0], 0, 1.0);
        assert!((p - 0.5).abs() < 1e-15);
        assert!(softmax_prob(&[10.0, 0.0], 0, 1.0) > 0.99);
    }
}
