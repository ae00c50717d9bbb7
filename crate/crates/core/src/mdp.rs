//! Finite MDPs, action-value tables and the Bellman operators used throughout
//! the crate.
//!
//! Everything here is a pure function of its inputs. A [`TabularMdp`] is
//! immutable once built and can be shared freely between threads.

use rand::Rng;

use crate::adversary::AttackMap;
use crate::error::{Error, Result};

/// Default convergence tolerance for iterative solvers.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration cap for value iteration.
pub const DEFAULT_MAX_ITER: usize = 100_000;
/// Transition probabilities at or below this value are treated as zero when
/// computing supports (absorbs rounding introduced by text round trips).
pub const SUPPORT_EPS: f64 = 1e-15;

const ROW_SUM_TOL: f64 = 1e-12;

/// A finite MDP `<S, A, P, R, gamma>` with initial and terminal state sets.
///
/// Terminal states are absorbing: every action self-loops with probability
/// one and earns zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    // flat [s][a][s']
    transition: Vec<f64>,
    // flat [s][a]
    reward: Vec<f64>,
    discount: f64,
    initial_states: Vec<usize>,
    terminal: Vec<bool>,
    coordinates: Option<Vec<Vec<f64>>>,
    // per-state admissible actions; all actions unless restricted
    admissible: Vec<Vec<usize>>,
    restricted: bool,
    r_max: f64,
    // nonzero entries of each (s, a) row, in column order
    row_start: Vec<usize>,
    row_next: Vec<usize>,
    row_prob: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from nested `[s][a][s']` transitions and `[s][a]`
    /// rewards. All states are initial and none are terminal until set.
    pub fn new(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let num_states = transition.len();
        if num_states == 0 {
            return Err(Error::InvalidMdp("num_states must be positive".into()));
        }
        let num_actions = transition[0].len();
        if num_actions == 0 {
            return Err(Error::InvalidMdp("num_actions must be positive".into()));
        }
        let mut flat = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != num_actions {
                return Err(Error::InvalidMdp(format!(
                    "transition[{s}] has {} actions, expected {num_actions}",
                    rows.len()
                )));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != num_states {
                    return Err(Error::InvalidMdp(format!(
                        "transition[{s}][{a}] has {} entries, expected {num_states}",
                        row.len()
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        if reward.len() != num_states {
            return Err(Error::InvalidMdp(format!(
                "reward has {} rows, expected {num_states}",
                reward.len()
            )));
        }
        let mut flat_r = Vec::with_capacity(num_states * num_actions);
        for (s, row) in reward.iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::InvalidMdp(format!(
                    "reward[{s}] has {} entries, expected {num_actions}",
                    row.len()
                )));
            }
            flat_r.extend_from_slice(row);
        }
        Self::from_flat(num_states, num_actions, flat, flat_r, discount)
    }

    /// Builds an MDP from flat row-major tensors.
    pub fn from_flat(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("num_states and num_actions must be positive".into()));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::InvalidMdp("transition tensor has the wrong size".into()));
        }
        if reward.len() != num_states * num_actions {
            return Err(Error::InvalidMdp("reward table has the wrong size".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!("discount {discount} not in [0, 1)")));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let base = (s * num_actions + a) * num_states;
                let row = &transition[base..base + num_states];
                if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                    return Err(Error::InvalidMdp(format!(
                        "transition[{s}][{a}] has invalid probability {p}"
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition[{s}][{a}] sums to {total}, expected 1"
                    )));
                }
                let r = reward[s * num_actions + a];
                if !r.is_finite() {
                    return Err(Error::InvalidMdp(format!("reward[{s}][{a}] is not finite")));
                }
            }
        }
        let r_max = reward.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut row_start = Vec::with_capacity(num_states * num_actions + 1);
        let (mut row_next, mut row_prob) = (Vec::new(), Vec::new());
        for row in transition.chunks(num_states) {
            row_start.push(row_next.len());
            for (next, &p) in row.iter().enumerate().filter(|(_, &p)| p != 0.0) {
                row_next.push(next);
                row_prob.push(p);
            }
        }
        row_start.push(row_next.len());
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_states: (0..num_states).collect(),
            terminal: vec![false; num_states],
            coordinates: None,
            admissible: vec![(0..num_actions).collect(); num_states],
            restricted: false,
            r_max,
            row_start,
            row_next,
            row_prob,
        })
    }

    pub fn with_initial_states(mut self, mut states: Vec<usize>) -> Result<Self> {
        states.sort_unstable();
        states.dedup();
        if states.is_empty() {
            return Err(Error::InvalidMdp("initial_states must be nonempty".into()));
        }
        if let Some(&s) = states.iter().find(|&&s| s >= self.num_states) {
            return Err(Error::StateOutOfRange {
                state: s,
                num_states: self.num_states,
            });
        }
        self.initial_states = states;
        Ok(self)
    }

    /// Marks states as terminal. Each must already be absorbing with zero
    /// reward under every action.
    pub fn with_terminal_states(mut self, states: Vec<usize>) -> Result<Self> {
        let mut terminal = vec![false; self.num_states];
        for s in states {
            if s >= self.num_states {
                return Err(Error::StateOutOfRange {
                    state: s,
                    num_states: self.num_states,
                });
            }
            for a in 0..self.num_actions {
                if self.p(s, a, s) != 1.0 || self.reward(s, a) != 0.0 {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {s} must self-loop with probability 1 and reward 0 under action {a}"
                    )));
                }
            }
            terminal[s] = true;
        }
        self.terminal = terminal;
        Ok(self)
    }

    pub fn with_coordinates(mut self, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.len() != self.num_states {
            return Err(Error::InvalidMdp(format!(
                "coordinates has {} rows, expected {}",
                coords.len(),
                self.num_states
            )));
        }
        let dim = coords[0].len();
        if coords.iter().any(|c| c.len() != dim || c.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidMdp("coordinates must be finite and share one dimension".into()));
        }
        self.coordinates = Some(coords);
        Ok(self)
    }

    /// Restricts the actions available in each state. Excluded actions keep
    /// their table entries but are never selected by maximizing operators.
    pub fn with_admissible_actions(mut self, sets: Vec<Vec<usize>>) -> Result<Self> {
        if sets.len() != self.num_states {
            return Err(Error::InvalidMdp("one admissible set per state required".into()));
        }
        let mut out = Vec::with_capacity(sets.len());
        for (s, mut set) in sets.into_iter().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::InvalidMdp(format!("state {s} has no admissible action")));
            }
            if let Some(&a) = set.iter().find(|&&a| a >= self.num_actions) {
                return Err(Error::ActionOutOfRange {
                    action: a,
                    num_actions: self.num_actions,
                });
            }
            out.push(set);
        }
        self.admissible = out;
        self.restricted = true;
        Ok(self)
    }

    /// Same MDP with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!("discount {discount} not in [0, 1)")));
        }
        let mut out = self.clone();
        out.discount = discount;
        Ok(out)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Largest entry of the reward table.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + next]
    }

    /// Distribution over successor states for `(s, a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &self.transition[base..base + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn initial_states(&self) -> &[usize] {
        &self.initial_states
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.num_states).filter(|&s| self.terminal[s]).collect()
    }

    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn coordinates(&self) -> Option<&[Vec<f64>]> {
        self.coordinates.as_deref()
    }

    #[inline]
    pub fn admissible_actions(&self, s: usize) -> &[usize] {
        &self.admissible[s]
    }

    pub fn has_action_restrictions(&self) -> bool {
        self.restricted
    }

    /// `sum_s' P(s'|s,a) * values[s']`, skipping zero-probability entries.
    #[inline]
    pub fn expected(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        let row = s * self.num_actions + a;
        let (lo, hi) = (self.row_start[row], self.row_start[row + 1]);
        self.row_next[lo..hi].iter().zip(&self.row_prob[lo..hi]).map(|(&next, p)| p * values[next]).sum()
    }

    /// Successor states of `(s, a)` with probability above [`SUPPORT_EPS`].
    pub fn support(&self, s: usize, a: usize) -> impl Iterator<Item = usize> + '_ {
        self.transition_row(s, a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > SUPPORT_EPS)
            .map(|(next, _)| next)
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = s;
        for (next, &p) in self.transition_row(s, a).iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = next;
            if u < acc {
                return next;
            }
        }
        last
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s < self.num_states {
            Ok(())
        } else {
            Err(Error::StateOutOfRange {
                state: s,
                num_states: self.num_states,
            })
        }
    }

    fn check_q(&self, q: &QTable) -> Result<()> {
        if q.num_states() != self.num_states || q.num_actions() != self.num_actions {
            return Err(Error::InvalidArgument(format!(
                "Q table is {}x{}, MDP is {}x{}",
                q.num_states(),
                q.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        if !q.is_finite() {
            return Err(Error::InvalidArgument("Q table has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Dense `|S| x |A|` action-value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self::constant(num_states, num_actions, 0.0)
    }

    pub fn constant(num_states: usize, num_actions: usize, value: f64) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![value; num_states * num_actions],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidArgument("Q table must be nonempty".into()));
        }
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::InvalidArgument("Q table rows must have equal length".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Q table entries must be finite".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub(crate) fn from_flat(num_states: usize, num_actions: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), num_states * num_actions);
        Self {
            num_states,
            num_actions,
            values,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.num_actions).map(<[f64]>::to_vec).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `max_a q[s][a]`.
    pub fn max_in(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sup-norm distance `||self - other||_inf`.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "Q table shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Position and size of the largest entrywise difference.
    pub fn sup_witness(&self, other: &QTable) -> (usize, usize, f64) {
        let mut best = (0, 0, 0.0);
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            let d = (a - b).abs();
            if d > best.2 {
                best = (i / self.num_actions, i % self.num_actions, d);
            }
        }
        best
    }
}

/// Deterministic policy from observed state to action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetPolicy {
    action_of: Vec<usize>,
}

impl DetPolicy {
    pub fn new(action_of: Vec<usize>, num_actions: usize) -> Result<Self> {
        if let Some(&a) = action_of.iter().find(|&&a| a >= num_actions) {
            return Err(Error::ActionOutOfRange { action: a, num_actions });
        }
        Ok(Self { action_of })
    }

    pub fn constant(num_observations: usize, action: usize) -> Self {
        Self {
            action_of: vec![action; num_observations],
        }
    }

    #[inline]
    pub fn action(&self, observed: usize) -> usize {
        self.action_of[observed]
    }

    pub fn len(&self) -> usize {
        self.action_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_of.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.action_of
    }
}

/// Per-state values `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateValue {
    pub values: Vec<f64>,
}

impl StateValue {
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Index of the smallest value, lowest index on ties.
pub(crate) fn argmin(values: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        match best {
            Some((_, bv)) if v >= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// `argmax_a q[s][a]` for every state, lowest action on ties.
pub fn greedy_policy(q: &QTable) -> DetPolicy {
    let action_of = (0..q.num_states())
        .map(|s| argmax(q.row(s).iter().copied().enumerate()))
        .collect();
    DetPolicy { action_of }
}

/// Greedy policy restricted to each state's admissible actions.
pub fn greedy_admissible(mdp: &TabularMdp, q: &QTable) -> DetPolicy {
    let action_of = (0..q.num_states())
        .map(|s| argmax(mdp.admissible_actions(s).iter().map(|&a| (a, q.get(s, a)))))
        .collect();
    DetPolicy { action_of }
}

fn max_admissible(mdp: &TabularMdp, q: &QTable, s: usize) -> f64 {
    if mdp.restricted {
        mdp.admissible_actions(s)
            .iter()
            .map(|&a| q.get(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        q.max_in(s)
    }
}

/// `R(s,a) + gamma * sum_s' P(s'|s,a) * next_value[s']` for all pairs.
fn backup_with(mdp: &TabularMdp, next_value: &[f64]) -> QTable {
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let gamma = mdp.discount;
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let cont = mdp.expected(s, a, next_value);
            out.push(mdp.reward(s, a) + gamma * cont);
        }
    }
    QTable::from_flat(ns, na, out)
}

/// One application of the Bellman optimality operator `T*`.
pub fn bellman_optimal_backup(mdp: &TabularMdp, q: &QTable) -> Result<QTable> {
    mdp.check_q(q)?;
    let next: Vec<f64> = (0..mdp.num_states).map(|s| max_admissible(mdp, q, s)).collect();
    Ok(backup_with(mdp, &next))
}

/// Value iteration from `Q = 0` until `||T*Q - Q||_inf <= tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iter: usize) -> Result<QTable> {
    value_iteration_with_residuals(mdp, tol, max_iter).map(|(q, _)| q)
}

/// Value iteration that also returns the residual `||T*Q_k - Q_k||_inf` of
/// every sweep.
pub fn value_iteration_with_residuals(
    mdp: &TabularMdp,
    tol: f64,
    max_iter: usize,
) -> Result<(QTable, Vec<f64>)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    let mut q = QTable::zeros(mdp.num_states, mdp.num_actions);
    let mut residuals = Vec::new();
    for _ in 0..max_iter {
        let next = bellman_optimal_backup(mdp, &q)?;
        let residual = next.sup_distance(&q);
        residuals.push(residual);
        q = next;
        // the returned table's own residual is at most gamma * residual
        if residual <= tol {
            return Ok((q, residuals));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

fn check_pair(mdp: &TabularMdp, pi: &DetPolicy, omega: &AttackMap) -> Result<()> {
    if omega.len() != mdp.num_states {
        return Err(Error::InvalidArgument(format!(
            "attack map covers {} states, MDP has {}",
            omega.len(),
            mdp.num_states
        )));
    }
    for s in 0..mdp.num_states {
        let observed = omega.observed(s);
        if observed >= pi.len() {
            return Err(Error::StateOutOfRange {
                state: observed,
                num_states: pi.len(),
            });
        }
        let a = pi.action(observed);
        if a >= mdp.num_actions {
            return Err(Error::ActionOutOfRange {
                action: a,
                num_actions: mdp.num_actions,
            });
        }
    }
    Ok(())
}

/// Action actually executed in each true state under `pi ∘ omega`.
fn executed_actions(mdp: &TabularMdp, pi: &DetPolicy, omega: &AttackMap) -> Vec<usize> {
    (0..mdp.num_states).map(|s| pi.action(omega.observed(s))).collect()
}

/// One application of `T^{pi∘omega}`:
/// `R(s,a) + gamma * sum_s' P(s'|s,a) q[s'][pi(omega(s'))]`.
pub fn bellman_policy_backup(mdp: &TabularMdp, q: &QTable, pi: &DetPolicy, omega: &AttackMap) -> Result<QTable> {
    mdp.check_q(q)?;
    check_pair(mdp, pi, omega)?;
    let acts = executed_actions(mdp, pi, omega);
    let next: Vec<f64> = acts.iter().enumerate().map(|(s, &a)| q.get(s, a)).collect();
    Ok(backup_with(mdp, &next))
}

/// `Q^{pi∘omega}`, the fixed point of [`bellman_policy_backup`], to residual
/// at most `tol`.
pub fn evaluate_policy_q(mdp: &TabularMdp, pi: &DetPolicy, omega: &AttackMap, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    check_pair(mdp, pi, omega)?;
    let acts = executed_actions(mdp, pi, omega);
    let v = evaluate_actions(mdp, &acts, tol)?;
    Ok(backup_with(mdp, &v))
}

/// Value of the stationary action assignment `acts` (true state -> action).
/// The Q table rebuilt from the returned values has policy residual at most
/// `gamma * tol`.
pub(crate) fn evaluate_actions(mdp: &TabularMdp, acts: &[usize], tol: f64) -> Result<Vec<f64>> {
    let ns = mdp.num_states;
    let gamma = mdp.discount;
    let mut v = vec![0.0; ns];
    let max_iter = DEFAULT_MAX_ITER * 10;
    for _ in 0..max_iter {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                let a = acts[s];
                let cont = mdp.expected(s, a, &v);
                mdp.reward(s, a) + gamma * cont
            })
            .collect();
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual <= tol {
            return Ok(v);
        }
    }
    // a fixed-policy operator is a gamma-contraction, so this is a bug
    Err(Error::Internal(format!(
        "policy evaluation failed to converge in {max_iter} sweeps"
    )))
}

/// `V_{pi∘omega}(s) = Q^{pi∘omega}(s, pi(omega(s)))`.
pub fn state_value(q: &QTable, pi: &DetPolicy, omega: &AttackMap) -> StateValue {
    let values = (0..q.num_states())
        .map(|s| q.get(s, pi.action(omega.observed(s))))
        .collect();
    StateValue { values }
}
