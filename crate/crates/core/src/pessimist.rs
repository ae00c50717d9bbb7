//! Maximin action selection, pessimistic Q-iteration, pessimistic
//! Q-learning and the performance-loss bound checker.
//!
//! The agent never sees the true state, only an observation within `eps` of
//! it, so it picks the action whose worst-case value over the plausible
//! states is largest:
//!
//! ```text
//! pi(s~)   = argmax_a min_{s_ in B_eps(s~)} Q(s_, a)
//! omega(s) = argmin_{s~ in B_eps(s)} Q(s, pi(s~))
//! ```
//!
//! Pessimistic Q-iteration repeats `Q_{n+1} = T^{pi_n∘omega_n} Q_n` with
//! both policies re-derived from `Q_n`. The iterates need not converge, but
//! the value of `pi_n∘omega_n` stays within
//! `(1+gamma)/(1-gamma)^2 * Delta` of the unattacked optimum, where
//! `Delta = 2 eps gamma (l_r + l_p |S| R_max / (1-gamma))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{fine_tol, optimal_attack, AttackMap};
use crate::error::{Error, Result};
use crate::mdp::{
    argmax, argmin, bellman_optimal_backup, bellman_policy_backup, evaluate_policy_q, state_value, value_iteration,
    DetPolicy, QTable, TabularMdp, DEFAULT_MAX_ITER,
};
use crate::metric::{all_balls, lipschitz_constants, q_lipschitz_bound, LipschitzConstants, StateMetric};

/// Slack allowed on the bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// Per-action worst case `min_{s in set} q[s][a]`.
pub fn worst_case_scores(q: &QTable, set: &[usize]) -> Vec<f64> {
    (0..q.num_actions())
        .map(|a| set.iter().map(|&s| q.get(s, a)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// `argmax_a min_{s in belief} q[s][a]`, lowest action on ties.
pub fn maximin_action(q: &QTable, belief: &[usize]) -> Result<usize> {
    if belief.is_empty() {
        return Err(Error::EmptyBelief);
    }
    if let Some(&s) = belief.iter().find(|&&s| s >= q.num_states()) {
        return Err(Error::StateOutOfRange {
            state: s,
            num_states: q.num_states(),
        });
    }
    Ok(argmax(worst_case_scores(q, belief).into_iter().enumerate()))
}

fn maximin_over_balls(q: &QTable, balls: &[Vec<usize>]) -> DetPolicy {
    let actions = balls
        .iter()
        .map(|ball| argmax(worst_case_scores(q, ball).into_iter().enumerate()))
        .collect();
    DetPolicy::new(actions, q.num_actions()).expect("maximin actions are in range")
}

fn best_response_over_balls(q: &QTable, pi: &DetPolicy, balls: &[Vec<usize>], epsilon: f64, metric_id: &str) -> AttackMap {
    let perturb = balls
        .iter()
        .enumerate()
        .map(|(s, ball)| argmin(ball.iter().map(|&o| (o, q.get(s, pi.action(o))))))
        .collect();
    AttackMap::unchecked(perturb, epsilon, metric_id)
}

/// Drops terminal states from a candidate set unless nothing would remain.
/// The agent only ever acts in non-terminal states, so a terminal candidate
/// cannot be the true state.
pub fn decision_set(mdp: &TabularMdp, set: Vec<usize>) -> Vec<usize> {
    if set.iter().all(|&s| mdp.is_terminal(s)) {
        return set;
    }
    set.into_iter().filter(|&s| !mdp.is_terminal(s)).collect()
}

/// `decision_set` of every state's ball, indexed by the observed state.
pub fn decision_sets(metric: &StateMetric, mdp: &TabularMdp, epsilon: f64) -> Vec<Vec<usize>> {
    all_balls(metric, mdp, epsilon)
        .into_iter()
        .map(|ball| decision_set(mdp, ball))
        .collect()
}

/// Maximin policy over every observed state's ball (terminal states
/// excluded).
pub fn maximin_policy(q: &QTable, epsilon: f64, metric: &StateMetric, mdp: &TabularMdp) -> DetPolicy {
    maximin_over_balls(q, &decision_sets(metric, mdp, epsilon))
}

/// One round of pessimistic Q-iteration: the table it started from and the
/// policies derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStep {
    pub q: QTable,
    pub policy: DetPolicy,
    pub attack: AttackMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PessimisticTrace {
    /// `steps[n]` holds `Q_n`, `pi_n` and `omega_{pi_n}`.
    pub steps: Vec<IterationStep>,
    /// `Q_{n_iters}`.
    pub final_q: QTable,
}

impl PessimisticTrace {
    /// `Q_n` for `n` in `0..=n_iters`.
    pub fn q(&self, n: usize) -> &QTable {
        if n == self.steps.len() {
            &self.final_q
        } else {
            &self.steps[n].q
        }
    }
}

/// Pessimistic Q-iteration from `Q_0 = 0` for `n_iters` rounds.
pub fn pessimistic_q_iteration(mdp: &TabularMdp, epsilon: f64, metric: &StateMetric, n_iters: usize) -> Result<PessimisticTrace> {
    pessimistic_q_iteration_from(mdp, epsilon, metric, n_iters, QTable::zeros(mdp.num_states(), mdp.num_actions()))
}

/// Pessimistic Q-iteration from an arbitrary starting table.
pub fn pessimistic_q_iteration_from(
    mdp: &TabularMdp,
    epsilon: f64,
    metric: &StateMetric,
    n_iters: usize,
    start: QTable,
) -> Result<PessimisticTrace> {
    if n_iters == 0 {
        return Err(Error::InvalidArgument("n_iters must be at least 1".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if metric.len() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric must cover the state space".into()));
    }
    let balls = all_balls(metric, mdp, epsilon);
    let sets = decision_sets(metric, mdp, epsilon);
    let mut steps = Vec::with_capacity(n_iters);
    let mut q = start;
    for _ in 0..n_iters {
        let policy = maximin_over_balls(&q, &sets);
        let attack = best_response_over_balls(&q, &policy, &balls, epsilon, metric.id());
        let next = bellman_policy_backup(mdp, &q, &policy, &attack)?;
        steps.push(IterationStep { q, policy, attack });
        q = next;
    }
    Ok(PessimisticTrace { steps, final_q: q })
}

/// `||T*Q_n - Q_{n+1}||_inf` for every recorded step.
pub fn bellman_errors(mdp: &TabularMdp, trace: &PessimisticTrace) -> Result<Vec<f64>> {
    (0..trace.steps.len())
        .map(|n| Ok(bellman_optimal_backup(mdp, trace.q(n))?.sup_distance(trace.q(n + 1))))
        .collect()
}

/// Hyperparameters for tabular Q-learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSchedule {
    /// Learning rate in `[0, 1]`.
    pub alpha: f64,
    pub explore_start: f64,
    pub explore_end: f64,
    /// Steps over which exploration decays linearly from start to end.
    pub explore_decay_steps: usize,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            explore_start: 1.0,
            explore_end: 0.05,
            explore_decay_steps: 600_000,
            episodes: 30_000,
            horizon: 100,
            seed: 0,
        }
    }
}

impl LearningSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("learning schedule: {msg}")));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.explore_start) || !(0.0..=1.0).contains(&self.explore_end) {
            return bad("exploration probabilities must lie in [0, 1]");
        }
        if self.explore_end > self.explore_start {
            return bad("explore_end must not exceed explore_start");
        }
        if self.episodes == 0 || self.horizon == 0 {
            return bad("episodes and horizon must be positive");
        }
        Ok(())
    }

    /// Exploration probability at global step `t`.
    pub fn explore_at(&self, t: usize) -> f64 {
        if self.explore_decay_steps == 0 {
            return self.explore_end;
        }
        let frac = (t as f64 / self.explore_decay_steps as f64).min(1.0);
        self.explore_start + (self.explore_end - self.explore_start) * frac
    }
}

/// Pessimistic Q-learning from `Q = 0`.
pub fn pessimistic_q_learning(mdp: &TabularMdp, epsilon: f64, metric: &StateMetric, schedule: &LearningSchedule) -> Result<QTable> {
    pessimistic_q_learning_from(mdp, epsilon, metric, schedule, QTable::zeros(mdp.num_states(), mdp.num_actions()))
}

/// Pessimistic Q-learning from a warm-start table.
///
/// The agent and attacker policies are derived lazily at the states a step
/// touches. Both are pure functions of the current table evaluated at one
/// point, so this is exactly the same as refreshing them over all of `S`
/// before every step, at `O(|B_eps|^2 |A|)` per step instead of
/// `O(|S| |B_eps|^2 |A|)`. With `epsilon = 0` it is ordinary Q-learning.
pub fn pessimistic_q_learning_from(
    mdp: &TabularMdp,
    epsilon: f64,
    metric: &StateMetric,
    schedule: &LearningSchedule,
    init: QTable,
) -> Result<QTable> {
    schedule.validate()?;
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be nonnegative, got {epsilon}")));
    }
    if metric.len() != mdp.num_states() {
        return Err(Error::InvalidArgument("metric must cover the state space".into()));
    }
    if init.num_states() != mdp.num_states() || init.num_actions() != mdp.num_actions() {
        return Err(Error::InvalidArgument("warm-start table has the wrong shape".into()));
    }
    let balls = all_balls(metric, mdp, epsilon);
    let sets = decision_sets(metric, mdp, epsilon);
    let starts = mdp.initial_states();
    let gamma = mdp.discount();
    let num_actions = mdp.num_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut q = init;
    let mut t = 0usize;

    let agent = |q: &QTable, observed: usize| argmax(worst_case_scores(q, &sets[observed]).into_iter().enumerate());
    let attacker = |q: &QTable, s: usize| argmin(balls[s].iter().map(|&o| (o, q.get(s, agent(q, o)))));

    for _ in 0..schedule.episodes {
        let mut s = starts[rng.random_range(0..starts.len())];
        for _ in 0..schedule.horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let observed = attacker(&q, s);
            let greedy = agent(&q, observed);
            let a = if rng.random::<f64>() < schedule.explore_at(t) {
                rng.random_range(0..num_actions)
            } else {
                greedy
            };
            let next = mdp.sample_next(s, a, &mut rng);
            let next_action = agent(&q, attacker(&q, next));
            let target = mdp.reward(s, a) + gamma * q.get(next, next_action);
            let old = q.get(s, a);
            q.set(s, a, old + schedule.alpha * (target - old));
            s = next;
            t += 1;
        }
    }
    Ok(q)
}

/// Outcome of checking the performance-loss bound on one MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub gamma: f64,
    pub constants: LipschitzConstants,
    /// Lipschitz constant of `Q^pi` in the state.
    pub l_q: f64,
    pub delta: f64,
    /// `(1 + gamma) / (1 - gamma)^2 * delta`.
    pub bound: f64,
    /// `||Q* - Q^{pi_n∘omega_n}||_inf` for each iteration in the window.
    pub gaps: Vec<f64>,
    /// Largest gap in the window (stands in for the limsup).
    pub observed_gap: f64,
    /// Largest Bellman approximation error `||T*Q_n - Q_{n+1}||_inf` over
    /// the whole run.
    pub max_bellman_error: f64,
    pub satisfied: bool,
}

/// `Delta = 2 eps gamma L_Q`.
pub fn theorem1_delta(consts: &LipschitzConstants, num_states: usize, r_max: f64, gamma: f64, epsilon: f64) -> f64 {
    2.0 * epsilon * gamma * q_lipschitz_bound(consts, num_states, r_max, gamma)
}

/// `(1 + gamma) / (1 - gamma)^2 * delta`.
pub fn theorem1_bound(delta: f64, gamma: f64) -> f64 {
    (1.0 + gamma) / ((1.0 - gamma) * (1.0 - gamma)) * delta
}

/// Runs pessimistic Q-iteration for `n_iters` rounds, evaluates the joint
/// policy of each of the last `window` rounds exactly and compares the worst
/// gap to the unattacked optimum against the bound.
pub fn theorem1_check(mdp: &TabularMdp, metric: &StateMetric, epsilon: f64, n_iters: usize, window: usize) -> Result<BoundReport> {
    if window == 0 || window > n_iters {
        return Err(Error::InvalidArgument(format!(
            "window must be in 1..={n_iters}, got {window}"
        )));
    }
    let gamma = mdp.discount();
    let constants = lipschitz_constants(mdp, metric)?;
    let l_q = q_lipschitz_bound(&constants, mdp.num_states(), mdp.r_max(), gamma);
    let delta = 2.0 * epsilon * gamma * l_q;
    let bound = theorem1_bound(delta, gamma);

    let tol = fine_tol(mdp);
    let q_star = value_iteration(mdp, tol, DEFAULT_MAX_ITER * 10)?;
    let trace = pessimistic_q_iteration(mdp, epsilon, metric, n_iters)?;
    let max_bellman_error = bellman_errors(mdp, &trace)?.into_iter().fold(0.0, f64::max);

    let gaps = trace.steps[n_iters - window..]
        .iter()
        .map(|step| Ok(q_star.sup_distance(&evaluate_policy_q(mdp, &step.policy, &step.attack, tol)?)))
        .collect::<Result<Vec<_>>>()?;
    let observed_gap = gaps.iter().copied().fold(0.0, f64::max);
    Ok(BoundReport {
        epsilon,
        gamma,
        constants,
        l_q,
        delta,
        bound,
        gaps,
        observed_gap,
        max_bellman_error,
        satisfied: observed_gap <= bound + BOUND_SLACK,
    })
}

/// `V*(s0) - V_{pi∘omega*}(s0)` for every `s0`, where `omega*` is the
/// optimal attack on `pi` and `V*` the unattacked optimum.
pub fn stackelberg_gap(mdp: &TabularMdp, pi: &DetPolicy, epsilon: f64, metric: &StateMetric, tol: f64) -> Result<Vec<f64>> {
    let fine = fine_tol(mdp).min(tol);
    let q_star = value_iteration(mdp, fine, DEFAULT_MAX_ITER * 10)?;
    let omega = optimal_attack(mdp, pi, epsilon, metric, tol)?;
    let attacked = state_value(&evaluate_policy_q(mdp, pi, &omega, fine)?, pi, &omega);
    Ok((0..mdp.num_states())
        .map(|s| q_star.max_in(s) - attacked.get(s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::counterexample_fixture;

    #[test]
    fn counterexample_maximin_actions() {
        let fx = counterexample_fixture();
        let all = [0, 1, 2];
        assert_eq!(worst_case_scores(&fx.q1, &all), vec![3.0, 2.0, 1.0]);
        assert_eq!(maximin_action(&fx.q1, &all).unwrap(), 0);
        assert_eq!(worst_case_scores(&fx.q2, &all), vec![-2.0, -1.0, -3.0]);
        assert_eq!(maximin_action(&fx.q2, &all).unwrap(), 1);
    }

    #[test]
    fn singleton_belief_is_greedy() {
        let q = QTable::from_rows(vec![vec![1.0, 3.0, 2.0], vec![0.0, -1.0, 4.0]]).unwrap();
        assert_eq!(maximin_action(&q, &[0]).unwrap(), 1);
        assert_eq!(maximin_action(&q, &[1]).unwrap(), 2);
        assert!(matches!(maximin_action(&q, &[]), Err(Error::EmptyBelief)));
        assert!(maximin_action(&q, &[5]).is_err());
    }

    #[test]
    fn bound_formula_substitution() {
        let c = LipschitzConstants {
            l_r: 1.0,
            l_p: 0.1,
            reward_witness: None,
            transition_witness: None,
        };
        let delta = theorem1_delta(&c, 10, 1.0, 0.9, 0.5);
        assert!((delta - 9.9).abs() < 1e-12);
        assert!((theorem1_bound(delta, 0.9) - 1881.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_validation() {
        let mut s = LearningSchedule::default();
        assert!(s.validate().is_ok());
        s.explore_end = 0.9;
        s.explore_start = 0.5;
        assert!(s.validate().is_err());
        let s = LearningSchedule {
            alpha: 1.5,
            ..LearningSchedule::default()
        };
        assert!(s.validate().is_err());
        let s = LearningSchedule {
            explore_decay_steps: 10,
            explore_start: 1.0,
            explore_end: 0.0,
            ..LearningSchedule::default()
        };
        assert_eq!(s.explore_at(5), 0.5);
        assert_eq!(s.explore_at(50), 0.0);
    }

    #[test]
    fn window_must_fit() {
        let fx = counterexample_fixture();
        assert!(theorem1_check(&fx.mdp, &fx.metric, 1.0, 5, 6).is_err());
        assert!(theorem1_check(&fx.mdp, &fx.metric, 1.0, 5, 0).is_err());
    }
}
