//! Randomized invariants.

mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarl::adversary::{best_response_attack, optimal_attack, AttackMap};
use sarl::belief::BeliefTracker;
use sarl::envs::{build_gridworld, default_gridworld, GridworldSpec};
use sarl::io::{mdp_to_toml, parse_mdp};
use sarl::mdp::{bellman_optimal_backup, bellman_policy_backup, value_iteration, DEFAULT_MAX_ITER};
use sarl::metric::{lipschitz_constants, q_lipschitz_bound};
use sarl::pessimist::pessimistic_q_iteration;
use sarl::purifier::{purify, valid_state_set, ObservationSpace};
use sarl::{DetPolicy, QTable, StateMetric, TabularMdp};

fn instance() -> impl Strategy<Value = TabularMdp> {
    (2usize..=7, 1usize..=3, 1usize..=3, 0.0f64..0.98, any::<u64>())
        .prop_map(|(ns, na, b, g, seed)| random_instance(ns, na, b.min(ns), g, seed))
}

fn table(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> QTable {
    QTable::from_rows((0..ns).map(|_| (0..na).map(|_| rng.random_range(-10.0..10.0)).collect()).collect()).unwrap()
}

/// Distinct integer points on a 6x6 grid.
fn coords(rng: &mut ChaCha8Rng, n: usize) -> StateMetric {
    let mut cells: Vec<usize> = (0..36).collect();
    for k in (1..36).rev() {
        cells.swap(k, rng.random_range(0..=k));
    }
    StateMetric::chebyshev(cells[..n].iter().map(|&c| vec![(c % 6) as f64, (c / 6) as f64]).collect()).unwrap()
}

fn random_admissible(rng: &mut ChaCha8Rng, metric: &StateMetric, eps: f64) -> AttackMap {
    let space = ObservationSpace::identity(metric.clone());
    let map = (0..metric.len())
        .map(|s| {
            let ball = metric.within(s, eps);
            ball[rng.random_range(0..ball.len())]
        })
        .collect();
    AttackMap::new(map, eps, &space).unwrap()
}

fn random_policy(rng: &mut ChaCha8Rng, n: usize, na: usize) -> DetPolicy {
    DetPolicy::new((0..n).map(|_| rng.random_range(0..na)).collect(), na).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fixed_policy_backup_contracts(mdp in instance(), seed in any::<u64>(), eps in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let metric = coords(&mut rng, ns);
        let pi = random_policy(&mut rng, ns, na);
        let omega = random_admissible(&mut rng, &metric, eps);
        let (q1, q2) = (table(&mut rng, ns, na), table(&mut rng, ns, na));
        let lhs = bellman_policy_backup(&mdp, &q1, &pi, &omega).unwrap()
            .sup_distance(&bellman_policy_backup(&mdp, &q2, &pi, &omega).unwrap());
        prop_assert!(lhs <= mdp.discount() * q1.sup_distance(&q2) + 1e-12);
    }

    #[test]
    fn optimal_backup_is_monotone(mdp in instance(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let q1 = table(&mut rng, ns, na);
        let bumped = q1.rows().into_iter().map(|r| r.into_iter().map(|x| x + rng.random_range(0.0..1.0)).collect()).collect();
        let q2 = QTable::from_rows(bumped).unwrap();
        let (t1, t2) = (bellman_optimal_backup(&mdp, &q1).unwrap(), bellman_optimal_backup(&mdp, &q2).unwrap());
        for (a, b) in t1.values().iter().zip(t2.values()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn balls_are_symmetric_and_monotone(seed in any::<u64>(), n in 2usize..10, e1 in 0.0f64..3.0, e2 in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = coords(&mut rng, n);
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        for s in 0..n {
            let small = metric.within(s, lo);
            let big = metric.within(s, hi);
            prop_assert!(small.iter().all(|x| big.contains(x)));
            for &t in &big {
                prop_assert!(metric.within(t, hi).contains(&s));
            }
        }
    }

    #[test]
    fn attacked_values_are_lipschitz(seed in any::<u64>(), ns in 2usize..=6, na in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_instance(ns, na, 2.min(ns), 0.9, rng.random());
        let metric = coords(&mut rng, ns);
        let consts = lipschitz_constants(&mdp, &metric).unwrap();
        let l_q = q_lipschitz_bound(&consts, ns, mdp.r_max(), 0.9);
        let pi = random_policy(&mut rng, ns, na);
        let q_pi = solve_policy_q(&mdp, &pi, &identity(ns));
        let omega = best_response_attack(&q_pi, &pi, 1.0, &metric, &mdp).unwrap();
        let q = solve_policy_q(&mdp, &pi, omega.as_slice());
        for s1 in 0..ns {
            for s2 in 0..ns {
                for a in 0..na {
                    prop_assert!((q.get(s1, a) - q.get(s2, a)).abs() <= l_q * metric.distance(s1, s2) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn best_response_never_raises_the_chosen_value(mdp in instance(), seed in any::<u64>(), eps in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let metric = coords(&mut rng, ns);
        let q = table(&mut rng, ns, na);
        let pi = random_policy(&mut rng, ns, na);
        let omega = best_response_attack(&q, &pi, eps, &metric, &mdp).unwrap();
        for s in 0..ns {
            prop_assert!(metric.distance(s, omega.observed(s)) <= eps);
            prop_assert!(q.get(s, pi.action(omega.observed(s))) <= q.get(s, pi.action(s)));
        }
    }

    #[test]
    fn pessimistic_iterates_never_exceed_value_iterates(mdp in instance(), eps in 0.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = coords(&mut rng, mdp.num_states());
        let trace = pessimistic_q_iteration(&mdp, eps, &metric, 30).unwrap();
        let mut vi = QTable::zeros(mdp.num_states(), mdp.num_actions());
        for n in 0..=30 {
            for (p, v) in trace.q(n).values().iter().zip(vi.values()) {
                prop_assert!(*p <= v + 1e-9);
            }
            vi = bellman_optimal_backup(&mdp, &vi).unwrap();
        }
    }

    #[test]
    fn purification_is_idempotent_and_monotone(seed in any::<u64>(), kappa in 1usize..10) {
        let grid = default_gridworld();
        let valid = valid_state_set(&grid.mdp);
        let space = &grid.observations;
        let o = seed as usize % space.num_observations();
        let first = purify(o, &valid, space, 1).unwrap();
        prop_assert_eq!(first.len(), 1);
        let s = first.members()[0];
        prop_assert!(valid.contains(s));
        let again = purify(space.obs_of_state(s), &valid, space, 1).unwrap();
        prop_assert_eq!(again.members(), &[s]);
        let small = purify(o, &valid, space, kappa).unwrap();
        let big = purify(o, &valid, space, kappa + 1).unwrap();
        prop_assert!(small.is_subset_of(big.members()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimal_attack_beats_random_maps(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ns, na) = (rng.random_range(2..=5), rng.random_range(1..=3));
        let mdp = random_instance(ns, na, rng.random_range(1..=ns), 0.9, rng.random());
        let metric = coords(&mut rng, ns);
        let pi = random_policy(&mut rng, ns, na);
        let omega = optimal_attack(&mdp, &pi, 1.5, &metric, 1e-12).unwrap();
        let v = solve_policy_v(&mdp, &pi, omega.as_slice());
        let q = value_iteration(&mdp, 1e-10, DEFAULT_MAX_ITER).unwrap();
        let br = best_response_attack(&q, &pi, 1.5, &metric, &mdp).unwrap();
        let mut rivals = vec![br.as_slice().to_vec()];
        rivals.extend((0..100).map(|_| random_admissible(&mut rng, &metric, 1.5).as_slice().to_vec()));
        for rival in rivals {
            let w = solve_policy_v(&mdp, &pi, &rival);
            for s in 0..ns {
                prop_assert!(v[s] <= w[s] + 1e-9);
            }
        }
    }

    #[test]
    fn belief_contains_the_true_state(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = rng.random_range(2..=8);
        let mdp = random_instance(ns, 2, rng.random_range(1..=3).min(ns), 0.9, rng.random());
        let metric = coords(&mut rng, ns);
        let space = ObservationSpace::identity(metric.clone());
        let eps = rng.random_range(0..=2) as f64;
        let mut tracker = BeliefTracker::new(eps);
        let mut s = rng.random_range(0..ns);
        for _ in 0..50 {
            let ball = metric.within(s, eps);
            let o = ball[rng.random_range(0..ball.len())];
            let belief = tracker.observe(&mdp, &space, o).unwrap();
            prop_assert!(belief.contains(s));
            prop_assert!(belief.is_subset_of(&metric.within(o, eps)));
            let a = rng.random_range(0..2);
            tracker.record_action(a);
            s = mdp.sample_next(s, a, &mut rng);
        }
        prop_assert_eq!(tracker.fallbacks(), 0);
    }

    #[test]
    fn mdp_files_round_trip(mdp in instance(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = coords(&mut rng, mdp.num_states());
        let coords = metric.coordinates().unwrap().to_vec();
        let mdp = mdp.with_coordinates(coords.clone()).unwrap();
        let doc = parse_mdp(&mdp_to_toml(&mdp, Some(&metric)), "rt.toml").unwrap();
        prop_assert_eq!(&doc.mdp, &mdp);
        prop_assert_eq!(doc.mdp.coordinates().unwrap(), &coords[..]);
    }
}

#[test]
fn random_rows_are_distributions() {
    for seed in 0..50 {
        let mdp = random_instance(6, 3, 1 + seed as usize % 6, 0.9, seed);
        for s in 0..6 {
            for a in 0..3 {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn walls_are_never_reachable() {
    let grid = default_gridworld();
    let valid = valid_state_set(&grid.mdp);
    assert_eq!(valid.len(), grid.mdp.num_states());
    for o in 0..grid.num_cells() {
        let cell = grid.cell_of_observation(o);
        assert_eq!(grid.spec.walls.contains(&cell), grid.state_at(cell).is_none());
        assert_eq!(valid.is_valid_observation(&grid.observations, o), grid.state_at(cell).is_some());
    }
}

#[test]
fn sealed_room_is_excluded() {
    let spec = GridworldSpec::from_ascii(
        "S...#..\n\
         ....#..\n\
         ..G.#..\n\
         ....###\n\
         B......\n",
    )
    .unwrap();
    let grid = build_gridworld(&spec).unwrap();
    let valid = valid_state_set(&grid.mdp);
    let sealed = [(5, 0), (6, 0), (5, 1), (6, 1), (5, 2), (6, 2)];
    for s in 0..grid.mdp.num_states() {
        let cell = grid.cell_of_state(s);
        assert_eq!(valid.contains(s), !sealed.contains(&cell), "cell {cell:?}");
    }
}

#[test]
fn bounded_attack_keeps_the_true_state_in_the_purified_set() {
    let grid = default_gridworld();
    let valid = valid_state_set(&grid.mdp);
    let space = &grid.observations;
    for eps in [1.0, 2.0] {
        for s in 0..grid.mdp.num_states() {
            for o in space.observations_within(s, eps) {
                let kappa = space.states_within(o, eps).len();
                assert!(purify(o, &valid, space, kappa).unwrap().contains(s), "state {s} obs {o} eps {eps}");
            }
        }
    }
}
