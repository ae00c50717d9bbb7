use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{best_response_attack, optimal_attack, AttackMap};
use crate::belief::BeliefTracker;
use crate::envs::{counterexample_fixture, default_gridworld, random_mdp, RandomMdpSpec};
use crate::error::{Error, Result};
use crate::mdp::{
    bellman_policy_backup, evaluate_policy_q, greedy_policy, state_value, value_iteration, DetPolicy, QTable,
    TabularMdp,
};
use crate::metric::{lipschitz_constants, q_lipschitz_bound, StateMetric};
use crate::pessimist::{bellman_errors, maximin_policy, pessimistic_q_iteration, theorem1_check};
use crate::purifier::ObservationSpace;

use super::agent::Scenario;

const CONTRACTION_SLACK: f64 = 1e-12;
const LEMMA2_SLACK: f64 = 1e-9;
const THEOREM1_SLACK: f64 = 1e-6;
const EXACT_TOL: f64 = 1e-9;
const EVAL_TOL: f64 = 1e-13;

/// The property suites `verify_suite` can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Contraction,
    Counterexample,
    Lemma2,
    Theorem1,
    BeliefSoundness,
    AttackerOracle,
    Lipschitz,
    EpsilonZero,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::Contraction,
        CheckKind::Counterexample,
        CheckKind::Lemma2,
        CheckKind::Theorem1,
        CheckKind::BeliefSoundness,
        CheckKind::AttackerOracle,
        CheckKind::Lipschitz,
        CheckKind::EpsilonZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Contraction => "contraction",
            CheckKind::Counterexample => "counterexample",
            CheckKind::Lemma2 => "lemma2",
            CheckKind::Theorem1 => "theorem1",
            CheckKind::BeliefSoundness => "belief-soundness",
            CheckKind::AttackerOracle => "attacker-oracle",
            CheckKind::Lipschitz => "lipschitz",
            CheckKind::EpsilonZero => "epsilon-zero",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown check `{s}`")))
    }
}

/// Outcome of one property suite. `margin` is the largest observed
/// `lhs - rhs` over all trials (negative means every trial held with room to
/// spare).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: CheckKind,
    pub passed: bool,
    pub trials: usize,
    pub violations: usize,
    pub margin: f64,
    /// First violating instance, if any.
    pub witness: Option<String>,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} trials, {} violations, margin {:.3e}, {:.2}s; {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.check,
            self.trials,
            self.violations,
            self.margin,
            self.seconds,
            self.detail
        )?;
        if let Some(w) = &self.witness {
            write!(f, "; witness: {w}")?;
        }
        Ok(())
    }
}

/// Accumulates trial outcomes.
struct Tally {
    trials: usize,
    violations: usize,
    margin: f64,
    witness: Option<String>,
}

impl Tally {
    fn new() -> Self {
        Self {
            trials: 0,
            violations: 0,
            margin: f64::NEG_INFINITY,
            witness: None,
        }
    }

    /// Records `lhs <= rhs`.
    fn record(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> String) {
        self.trials += 1;
        self.margin = self.margin.max(lhs - rhs);
        if !(lhs <= rhs) {
            self.violations += 1;
            if self.witness.is_none() {
                self.witness = Some(witness());
            }
        }
    }

    fn finish(self, check: CheckKind, detail: String, started: Instant) -> CheckReport {
        CheckReport {
            check,
            passed: self.violations == 0 && self.trials > 0,
            trials: self.trials,
            violations: self.violations,
            margin: self.margin,
            witness: self.witness,
            detail,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Random MDP with `|S| <= max_states`, `|A| <= max_actions`, rewards in
/// `[0, 1]`.
fn random_instance(rng: &mut ChaCha8Rng, max_states: usize, max_actions: usize, gamma: f64) -> Result<TabularMdp> {
    let num_states = rng.random_range(2..=max_states);
    let spec = RandomMdpSpec {
        num_states,
        num_actions: rng.random_range(1..=max_actions),
        branching: rng.random_range(1..=num_states),
        reward_low: 0.0,
        reward_high: 1.0,
        seed: rng.random(),
    };
    random_mdp(&spec, gamma)
}

fn random_table(rng: &mut ChaCha8Rng, ns: usize, na: usize, scale: f64) -> QTable {
    let rows = (0..ns)
        .map(|_| (0..na).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    QTable::from_rows(rows).expect("finite table")
}

/// `n <= 25` distinct points of a 5x5 grid.
fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut cells: Vec<usize> = (0..25).collect();
    for k in (1..25).rev() {
        cells.swap(k, rng.random_range(0..=k));
    }
    cells[..n].iter().map(|&c| vec![(c % 5) as f64, (c / 5) as f64]).collect()
}

/// `||T^{pi∘omega} Q1 - T^{pi∘omega} Q2|| <= gamma ||Q1 - Q2||` for random
/// fixed `(pi, omega)`. With `gamma = Some(g)` every instance uses `g`.
pub fn check_contraction(trials: usize, seed: u64, gamma: Option<f64>) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    for trial in 0..trials {
        let g = gamma.unwrap_or_else(|| rng.random_range(0.0..0.99));
        let mdp = random_instance(&mut rng, 8, 4, g)?;
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let metric = StateMetric::chebyshev(random_coords(&mut rng, ns))?;
        let space = ObservationSpace::identity(metric.clone());
        let eps = rng.random_range(0..3) as f64;
        let pi = DetPolicy::new((0..ns).map(|_| rng.random_range(0..na)).collect(), na)?;
        let perturb = (0..ns)
            .map(|s| *metric.within(s, eps).choose(&mut rng).expect("ball contains its center"))
            .collect();
        let omega = AttackMap::new(perturb, eps, &space)?;
        let q1 = random_table(&mut rng, ns, na, 10.0);
        let q2 = random_table(&mut rng, ns, na, 10.0);
        let lhs = bellman_policy_backup(&mdp, &q1, &pi, &omega)?.sup_distance(&bellman_policy_backup(&mdp, &q2, &pi, &omega)?);
        let rhs = g * q1.sup_distance(&q2) + CONTRACTION_SLACK;
        tally.record(lhs, rhs, || format!("trial {trial}: |S|={ns} |A|={na} gamma={g} lhs={lhs} rhs={rhs}"));
    }
    let detail = format!("max lhs - gamma*||Q1-Q2|| = {:.3e}", tally.margin + CONTRACTION_SLACK);
    Ok(tally.finish(CheckKind::Contraction, detail, started))
}

/// Values from the three-state example: `(lhs, rhs)` where
/// `lhs = ||T^{pi1~} Q1 - T^{pi2~} Q2||` with each policy re-derived from its
/// own table and `rhs = ||Q1 - Q2||`.
pub fn counterexample_values(gamma: f64) -> Result<(f64, f64)> {
    let fx = counterexample_fixture();
    let mdp = fx.mdp.with_discount(gamma)?;
    let backup = |q: &QTable| -> Result<QTable> {
        let pi = maximin_policy(q, fx.epsilon, &fx.metric, &mdp);
        let omega = best_response_attack(q, &pi, fx.epsilon, &fx.metric, &mdp)?;
        bellman_policy_backup(&mdp, q, &pi, &omega)
    };
    Ok((backup(&fx.q1)?.sup_distance(&backup(&fx.q2)?), fx.q1.sup_distance(&fx.q2)))
}

/// The re-derived pessimistic update expands the distance between the two
/// fixed tables at `gamma = 0.95`: `lhs >= 10.45 > 10 = rhs`.
pub fn check_counterexample() -> Result<CheckReport> {
    let started = Instant::now();
    let gamma = 0.95;
    let (lhs, rhs) = counterexample_values(gamma)?;
    let expected = 11.0 * gamma;
    let mut tally = Tally::new();
    // confirmed when lhs clears both the predicted value and rhs
    tally.record(expected - CONTRACTION_SLACK, lhs, || format!("lhs {lhs} < {expected}"));
    tally.record(rhs, lhs - CONTRACTION_SLACK, || format!("lhs {lhs} <= rhs {rhs}"));
    let verdict = if tally.violations == 0 { "non-contraction confirmed" } else { "not reproduced" };
    Ok(tally.finish(CheckKind::Counterexample, format!("gamma {gamma}: lhs {lhs}, rhs {rhs}, {verdict}"), started))
}

/// Every step of pessimistic Q-iteration stays within
/// `2 eps gamma L_Q` of the optimal backup.
pub fn check_lemma2(instances: usize, n_iters: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let (eps, gamma) = (1.0, 0.9);
    for i in 0..instances {
        let mdp = random_instance(&mut rng, 8, 4, gamma)?;
        let metric = StateMetric::discrete(mdp.num_states());
        let consts = lipschitz_constants(&mdp, &metric)?;
        let bound = 2.0 * eps * gamma * q_lipschitz_bound(&consts, mdp.num_states(), mdp.r_max(), gamma);
        let trace = pessimistic_q_iteration(&mdp, eps, &metric, n_iters)?;
        for (n, err) in bellman_errors(&mdp, &trace)?.into_iter().enumerate() {
            tally.record(err, bound + LEMMA2_SLACK, || format!("instance {i}, step {n}: error {err} > bound {bound}"));
        }
    }
    let detail = format!("{instances} MDPs x {n_iters} steps, eps {eps}, gamma {gamma}");
    Ok(tally.finish(CheckKind::Lemma2, detail, started))
}

/// The worst gap to the unattacked optimum over the last `window` rounds
/// stays within `(1+gamma)/(1-gamma)^2 Delta`.
pub fn check_theorem1(instances: usize, n_iters: usize, window: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let (eps, gamma) = (1.0, 0.9);
    let mut tightest = f64::INFINITY;
    for i in 0..instances {
        let mdp = random_instance(&mut rng, 8, 4, gamma)?;
        let metric = StateMetric::discrete(mdp.num_states());
        let report = theorem1_check(&mdp, &metric, eps, n_iters, window)?;
        tightest = tightest.min(report.bound - report.observed_gap);
        tally.record(report.observed_gap, report.bound + THEOREM1_SLACK, || {
            format!("instance {i}: gap {} > bound {}", report.observed_gap, report.bound)
        });
    }
    let detail = format!("{instances} MDPs, last {window} of {n_iters} rounds; smallest slack {tightest:.3}");
    Ok(tally.finish(CheckKind::Theorem1, detail, started))
}

/// Simulates belief tracking under uniformly random admissible attacks and
/// random actions, counting steps where the true state is outside the belief
/// and fallbacks. Half the steps run on the shipped gridworld (with wall
/// observations allowed), half on random MDPs.
pub fn check_belief_soundness(steps: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    let mut fallbacks = 0;
    let grid = Scenario::from_gridworld("gridworld", &default_gridworld());
    let mut done = 0;
    let mut episode = 0;
    while done < steps {
        let (scenario, eps) = if episode % 2 == 0 {
            (grid.clone(), rng.random_range(0..=2) as f64)
        } else {
            let mdp = random_instance(&mut rng, 8, 4, 0.9)?;
            let metric = StateMetric::chebyshev(random_coords(&mut rng, mdp.num_states()))?;
            (Scenario::from_mdp("random", mdp, metric, 50)?, rng.random_range(0..=2) as f64)
        };
        episode += 1;
        let mdp = &scenario.mdp;
        let space = &scenario.space;
        let mut tracker = BeliefTracker::new(eps);
        let starts = mdp.initial_states();
        let mut s = starts[rng.random_range(0..starts.len())];
        for _ in 0..50 {
            if done >= steps || mdp.is_terminal(s) {
                break;
            }
            let candidates = space.observations_within(s, eps);
            let observed = *candidates.choose(&mut rng).expect("ball contains its center");
            let belief = tracker.observe(mdp, space, observed)?;
            let inside = belief.contains(s);
            tally.record(if inside { 0.0 } else { 1.0 }, 0.0, || {
                format!("{} episode {episode}: true state {s} outside belief {:?}", scenario.name, belief.members())
            });
            let a = rng.random_range(0..mdp.num_actions());
            tracker.record_action(a);
            s = mdp.sample_next(s, a, &mut rng);
            done += 1;
        }
        fallbacks += tracker.fallbacks();
    }
    if fallbacks > 0 {
        tally.violations += fallbacks;
        tally.witness.get_or_insert_with(|| format!("{fallbacks} empty-intersection fallbacks"));
    }
    let detail = format!("{done} steps over {episode} episodes, {fallbacks} fallbacks");
    Ok(tally.finish(CheckKind::BeliefSoundness, detail, started))
}

/// Value of `pi` under every admissible attack map, by enumeration.
fn enumerate_attack_values(mdp: &TabularMdp, pi: &DetPolicy, balls: &[Vec<usize>]) -> Result<Vec<f64>> {
    let ns = mdp.num_states();
    let mut best = vec![f64::INFINITY; ns];
    let mut idx = vec![0usize; ns];
    loop {
        let perturb: Vec<usize> = (0..ns).map(|s| balls[s][idx[s]]).collect();
        let omega = AttackMap::unchecked(perturb, 0.0, "enumerated");
        let v = state_value(&evaluate_policy_q(mdp, pi, &omega, EVAL_TOL)?, pi, &omega);
        for s in 0..ns {
            best[s] = best[s].min(v.get(s));
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == ns {
                return Ok(best);
            }
            idx[k] += 1;
            if idx[k] < balls[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// `optimal_attack` achieves the minimum victim value over all admissible
/// maps at every state, on four-state MDPs whose balls hold at most two
/// states.
pub fn check_attacker_oracle(instances: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    for i in 0..instances {
        let spec = RandomMdpSpec {
            num_states: 4,
            num_actions: rng.random_range(2..=3),
            branching: rng.random_range(1..=4),
            reward_low: -1.0,
            reward_high: 1.0,
            seed: rng.random(),
        };
        let mdp = random_mdp(&spec, rng.random_range(0.5..0.95))?;
        // pair states at distance 1, everything else at distance 3
        let mut order = [0usize, 1, 2, 3];
        for k in (1..4).rev() {
            order.swap(k, rng.random_range(0..=k));
        }
        let paired = rng.random_range(1..=2);
        let mut d = vec![vec![3.0; 4]; 4];
        for (k, row) in d.iter_mut().enumerate() {
            row[k] = 0.0;
        }
        for p in 0..paired {
            let (a, b) = (order[2 * p], order[2 * p + 1]);
            d[a][b] = 1.0;
            d[b][a] = 1.0;
        }
        let metric = StateMetric::matrix(d)?;
        let balls: Vec<Vec<usize>> = (0..4).map(|s| metric.within(s, 1.0)).collect();
        let pi = DetPolicy::new((0..4).map(|_| rng.random_range(0..spec.num_actions)).collect(), spec.num_actions)?;
        let omega = optimal_attack(&mdp, &pi, 1.0, &metric, EXACT_TOL)?;
        let v = state_value(&evaluate_policy_q(&mdp, &pi, &omega, EVAL_TOL)?, &pi, &omega);
        let oracle = enumerate_attack_values(&mdp, &pi, &balls)?;
        for s in 0..4 {
            let diff = (v.get(s) - oracle[s]).abs();
            tally.record(diff, EXACT_TOL, || {
                format!("instance {i}, state {s}: optimal_attack {} vs enumeration {}", v.get(s), oracle[s])
            });
        }
    }
    let detail = format!("{instances} MDPs, |S| = 4, balls of size <= 2");
    Ok(tally.finish(CheckKind::AttackerOracle, detail, started))
}

/// `|Q*(s1,a) - Q*(s2,a)| <= L_Q d(s1,s2)` on random MDPs with grid
/// coordinates, and the reported Lipschitz witnesses attain the constants.
pub fn check_lipschitz(instances: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    for i in 0..instances {
        let ns = rng.random_range(2..=8);
        let coords = random_coords(&mut rng, ns);
        let spec = RandomMdpSpec {
            num_states: ns,
            num_actions: rng.random_range(1..=4),
            branching: rng.random_range(1..=ns),
            reward_low: 0.0,
            reward_high: 1.0,
            seed: rng.random(),
        };
        let gamma = 0.9;
        let mdp = random_mdp(&spec, gamma)?;
        let metric = StateMetric::chebyshev(coords)?;
        let consts = lipschitz_constants(&mdp, &metric)?;
        let l_q = q_lipschitz_bound(&consts, ns, mdp.r_max(), gamma);
        let q = value_iteration(&mdp, EVAL_TOL, 10_000_000)?;
        for s1 in 0..ns {
            for s2 in s1 + 1..ns {
                for a in 0..mdp.num_actions() {
                    let lhs = (q.get(s1, a) - q.get(s2, a)).abs();
                    let rhs = l_q * metric.distance(s1, s2) + EXACT_TOL;
                    tally.record(lhs, rhs, || format!("instance {i}: states {s1},{s2} action {a}: {lhs} > {rhs}"));
                }
            }
        }
        if let Some((s1, s2, a)) = consts.reward_witness {
            let attained = (mdp.reward(s1, a) - mdp.reward(s2, a)).abs() / metric.distance(s1, s2);
            tally.record((attained - consts.l_r).abs(), EXACT_TOL, || format!("instance {i}: reward witness off"));
        }
        if let Some((s1, s2, a, next)) = consts.transition_witness {
            let attained = (mdp.p(s1, a, next) - mdp.p(s2, a, next)).abs() / metric.distance(s1, s2);
            tally.record((attained - consts.l_p).abs(), EXACT_TOL, || format!("instance {i}: transition witness off"));
        }
    }
    Ok(tally.finish(CheckKind::Lipschitz, format!("{instances} MDPs"), started))
}

/// With `eps = 0`, pessimistic Q-iteration matches value iteration and the
/// maximin policy is the greedy policy.
pub fn check_epsilon_zero(instances: usize, seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::new();
    for i in 0..instances {
        let gamma = 0.9;
        let mdp = random_instance(&mut rng, 8, 4, gamma)?;
        let metric = StateMetric::discrete(mdp.num_states());
        let q_star = value_iteration(&mdp, EVAL_TOL, 10_000_000)?;
        // enough rounds for gamma^n * R_max / (1 - gamma) to fall below 1e-12
        let n = ((1e-12 * (1.0 - gamma)).ln() / gamma.ln()).ceil() as usize;
        let q = pessimistic_q_iteration(&mdp, 0.0, &metric, n)?.final_q;
        let diff = q.sup_distance(&q_star);
        tally.record(diff, EXACT_TOL, || format!("instance {i}: ||Q - Q*|| = {diff}"));
        let maximin = maximin_policy(&q, 0.0, &metric, &mdp);
        let greedy = greedy_policy(&q);
        let mismatches = (0..mdp.num_states()).filter(|&s| maximin.action(s) != greedy.action(s)).count();
        tally.record(mismatches as f64, 0.0, || format!("instance {i}: maximin and greedy differ at {mismatches} states"));
    }
    Ok(tally.finish(CheckKind::EpsilonZero, format!("{instances} MDPs"), started))
}

/// Runs the selected suites with their standard sizes.
pub fn verify_suite(scope: &[CheckKind], seed: u64) -> Result<Vec<CheckReport>> {
    scope
        .iter()
        .map(|&check| match check {
            CheckKind::Contraction => check_contraction(1000, seed, None),
            CheckKind::Counterexample => check_counterexample(),
            CheckKind::Lemma2 => check_lemma2(100, 500, seed),
            CheckKind::Theorem1 => check_theorem1(100, 500, 50, seed),
            CheckKind::BeliefSoundness => check_belief_soundness(10_000, seed),
            CheckKind::AttackerOracle => check_attacker_oracle(50, seed),
            CheckKind::Lipschitz => check_lipschitz(100, seed),
            CheckKind::EpsilonZero => check_epsilon_zero(20, seed),
        })
        .collect()
}

/// Writes `verify.csv`; with `structured`, also `verify.toml` including
/// witnesses and details.
pub fn write_reports(reports: &[CheckReport], out_dir: &Path, structured: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("verify.csv"))?;
    w.write_record(["check", "passed", "trials", "violations", "margin", "seconds"])?;
    for r in reports {
        w.write_record([
            r.check.name().to_string(),
            r.passed.to_string(),
            r.trials.to_string(),
            r.violations.to_string(),
            format!("{:e}", r.margin),
            r.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    if structured {
        #[derive(Serialize)]
        struct Reports<'a> {
            checks: &'a [CheckReport],
        }
        let text = toml::to_string(&Reports { checks: reports })
            .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
        fs::write(out_dir.join("verify.toml"), text)?;
    }
    Ok(())
}
