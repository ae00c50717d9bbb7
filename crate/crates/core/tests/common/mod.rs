#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sarl::adversary::AttackMap;
use sarl::envs::{random_mdp, RandomMdpSpec};
use sarl::{DetPolicy, QTable, TabularMdp};

/// Solves `Q(s,a) - gamma sum_s' P(s'|s,a) Q(s', pi(omega(s'))) = R(s,a)`
/// directly by LU decomposition.
pub fn solve_policy_q(mdp: &TabularMdp, pi: &DetPolicy, omega: &[usize]) -> QTable {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let idx = |s: usize, a: usize| s * na + a;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            r[idx(s, a)] = mdp.reward(s, a);
            for next in 0..ns {
                let p = mdp.p(s, a, next);
                if p != 0.0 {
                    m[(idx(s, a), idx(next, pi.action(omega[next])))] -= mdp.discount() * p;
                }
            }
        }
    }
    let x = m.lu().solve(&r).expect("I - gamma P is nonsingular");
    QTable::from_rows((0..ns).map(|s| (0..na).map(|a| x[idx(s, a)]).collect()).collect()).unwrap()
}

/// `V(s) = Q(s, pi(omega(s)))` from the direct solve.
pub fn solve_policy_v(mdp: &TabularMdp, pi: &DetPolicy, omega: &[usize]) -> Vec<f64> {
    let q = solve_policy_q(mdp, pi, omega);
    (0..mdp.num_states()).map(|s| q.get(s, pi.action(omega[s]))).collect()
}

/// Every map choosing one element of each ball.
pub fn all_maps(balls: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for ball in balls {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                ball.iter().map(move |&o| {
                    let mut m = prefix.clone();
                    m.push(o);
                    m
                })
            })
            .collect();
    }
    out
}

/// Every deterministic policy over `n` observations and `na` actions.
pub fn all_policies(n: usize, na: usize) -> Vec<DetPolicy> {
    let choices = vec![(0..na).collect::<Vec<_>>(); n];
    all_maps(&choices).into_iter().map(|p| DetPolicy::new(p, na).unwrap()).collect()
}

pub fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

pub fn random_instance(num_states: usize, num_actions: usize, branching: usize, gamma: f64, seed: u64) -> TabularMdp {
    let spec = RandomMdpSpec {
        num_states,
        num_actions,
        branching,
        reward_low: 0.0,
        reward_high: 1.0,
        seed,
    };
    random_mdp(&spec, gamma).unwrap()
}

pub fn unchecked(map: Vec<usize>) -> AttackMap {
    AttackMap::unchecked(map, 0.0, "test")
}
