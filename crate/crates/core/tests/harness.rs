//! Episode simulation and the evaluation matrix.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarl::adversary::AttackMap;
use sarl::envs::{default_gridworld, Gridworld, ACTION_NAMES};
use sarl::harness::{
    evaluate, mean_std, run_episode, AgentKind, AgentModel, Attacker, AttackerKind, ExperimentConfig, Scenario,
    TableCache,
};
use sarl::mdp::{greedy_policy, value_iteration, DEFAULT_MAX_ITER};
use sarl::{Error, QTable, StateMetric, TabularMdp};

/// Fewest moves from `from` to the gold with 8-connected steps, never
/// entering a wall or the bomb.
fn moves_to_gold(grid: &Gridworld, from: usize) -> usize {
    let (w, h) = (grid.spec.width as i64, grid.spec.height as i64);
    let mut dist = vec![usize::MAX; grid.mdp.num_states()];
    dist[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(s) = queue.pop_front() {
        if s == grid.gold_state() {
            return dist[s];
        }
        if s == grid.bomb_state() {
            continue;
        }
        let (c, r) = grid.cell_of_state(s);
        for dc in -1..=1i64 {
            for dr in -1..=1i64 {
                let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                if (dc, dr) == (0, 0) || nc < 0 || nr < 0 || nc >= w || nr >= h {
                    continue;
                }
                if let Some(t) = grid.state_at((nc as usize, nr as usize)) {
                    if dist[t] == usize::MAX {
                        dist[t] = dist[s] + 1;
                        queue.push_back(t);
                    }
                }
            }
        }
    }
    panic!("gold unreachable from {from}");
}

fn vanilla(scenario: &Scenario) -> AgentModel {
    let q = value_iteration(&scenario.mdp, 1e-10, DEFAULT_MAX_ITER).unwrap();
    AgentModel::new(AgentKind::VanillaGreedy, q, 0.0, 1, scenario).unwrap()
}

fn no_attack(scenario: &Scenario) -> Attacker {
    let map = (0..scenario.mdp.num_states()).map(|s| scenario.space.obs_of_state(s)).collect();
    Attacker::Map(AttackMap::unchecked(map, 0.0, "none"))
}

#[test]
fn grid_has_eight_moves() {
    assert_eq!(default_gridworld().mdp.num_actions(), ACTION_NAMES.len());
}

#[test]
fn greedy_optimal_policy_reaches_gold_from_every_start() {
    let grid = default_gridworld();
    let q = value_iteration(&grid.mdp, 1e-10, DEFAULT_MAX_ITER).unwrap();
    let pi = greedy_policy(&q);
    for &start in grid.mdp.initial_states() {
        let mut s = start;
        let mut steps = 0;
        while !grid.mdp.is_terminal(s) && steps < grid.spec.horizon {
            let row = grid.mdp.transition_row(s, pi.action(s));
            s = row.iter().position(|&p| p == 1.0).expect("deterministic moves");
            steps += 1;
        }
        assert_eq!(s, grid.gold_state(), "start {start}");
    }
}

#[test]
fn unattacked_vanilla_return_is_the_shortest_path_return() {
    let grid = default_gridworld();
    let scenario = Scenario::from_gridworld("grid", &grid);
    let agent = vanilla(&scenario);
    let attacker = no_attack(&scenario);
    for seed in 0..30 {
        let traj = run_episode(&scenario, &agent, &attacker, 0.0, 100, seed).unwrap();
        let start = traj.steps[0].state;
        let d = moves_to_gold(&grid, start) as f64;
        assert_eq!(traj.total_return, grid.spec.gold_reward - (d - 1.0) * 1.0, "start {start}");
        assert!(traj.reached_terminal);
    }
}

#[test]
fn single_step_single_state_returns_the_reward() {
    let mdp = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.9).unwrap();
    let scenario = Scenario::from_mdp("one", mdp, StateMetric::discrete(1), 1).unwrap();
    let q = QTable::zeros(1, 1);
    for kind in AgentKind::ALL {
        let agent = AgentModel::new(kind, q.clone(), 1.0, 1, &scenario).unwrap();
        for attacker in [no_attack(&scenario), Attacker::Random { candidates: vec![vec![0]] }] {
            assert_eq!(run_episode(&scenario, &agent, &attacker, 1.0, 1, 3).unwrap().total_return, 1.0);
        }
    }
}

#[test]
fn reruns_are_identical() {
    let grid = default_gridworld();
    let scenario = Scenario::from_gridworld("grid", &grid);
    let q = TableCache::default().table(&scenario, true, 1.0, 100).unwrap().clone();
    let agent = AgentModel::new(AgentKind::BeliefPessimist, q, 1.0, 25, &scenario).unwrap();
    let candidates = (0..grid.mdp.num_states()).map(|s| scenario.space.observations_within(s, 1.0)).collect();
    let attacker = Attacker::Random { candidates };
    let a = run_episode(&scenario, &agent, &attacker, 1.0, 100, 42).unwrap();
    let b = run_episode(&scenario, &agent, &attacker, 1.0, 100, 42).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inadmissible_observation_aborts_with_the_step() {
    let grid = default_gridworld();
    let scenario = Scenario::from_gridworld("grid", &grid);
    let agent = vanilla(&scenario);
    // with no budget, showing every state the far corner cell is
    // inadmissible everywhere except at that cell
    let far = scenario.space.num_observations() - 1;
    let attacker = Attacker::Map(AttackMap::unchecked(vec![far; grid.mdp.num_states()], 0.0, "bad"));
    let mut at_start = 0;
    for seed in 0..30 {
        match run_episode(&scenario, &agent, &attacker, 0.0, 100, seed) {
            Err(Error::ContractViolation { step, .. }) => at_start += usize::from(step == 0),
            other => panic!("expected a contract violation, got {other:?}"),
        }
    }
    assert!(at_start > 0);
}

fn small_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::gridworld(
        vec![1.0, 2.0],
        vec![AgentKind::VanillaGreedy, AgentKind::BallPessimist],
        vec![AttackerKind::None, AttackerKind::BestResponse],
    );
    config.episodes = 8;
    config.iterations = 100;
    config
}

#[test]
fn unattacked_cells_do_not_depend_on_the_budget() {
    let result = evaluate(&small_config()).unwrap();
    let a = result.cell(AgentKind::VanillaGreedy, AttackerKind::None, 1.0).unwrap();
    let b = result.cell(AgentKind::VanillaGreedy, AttackerKind::None, 2.0).unwrap();
    assert_eq!(a.returns, b.returns);
}

#[test]
fn summary_matches_the_per_episode_column() {
    let result = evaluate(&small_config()).unwrap();
    let csv_text = result.results_csv().unwrap();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["agent", "attacker", "epsilon", "episode", "return"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    for c in &result.cells {
        assert!(c.error.is_none(), "{:?}", c.error);
        let returns: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == *c.agent.name() && r[1] == *c.attacker.name() && r[2].parse::<f64>().unwrap() == c.epsilon)
            .map(|r| r[4].parse().unwrap())
            .collect();
        let (mean, std) = mean_std(&returns);
        assert!((mean - c.mean).abs() <= 1e-12);
        assert!((std - c.std).abs() <= 1e-12);

        let mut shuffled = returns.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let (m2, s2) = mean_std(&shuffled);
        assert!((m2 - mean).abs() <= 1e-12 && (s2 - std).abs() <= 1e-12);
    }
}

#[test]
fn written_artifacts_reproduce_from_the_manifest() {
    let mut config = small_config();
    config.trajectories = true;
    let first = tempfile::tempdir().unwrap();
    evaluate(&config).unwrap().write(first.path(), true).unwrap();
    for name in ["results.csv", "summary.csv", "timings.csv", "manifest.toml", "summary.toml"] {
        assert!(first.path().join(name).exists(), "{name}");
    }
    assert!(first.path().join("trajectories").read_dir().unwrap().count() > 0);

    let replay = ExperimentConfig::load(first.path().join("manifest.toml")).unwrap();
    assert_eq!(replay, config);
    let second = tempfile::tempdir().unwrap();
    evaluate(&replay).unwrap().write(second.path(), false).unwrap();
    let read = |dir: &tempfile::TempDir| std::fs::read(dir.path().join("results.csv")).unwrap();
    assert_eq!(read(&first), read(&second));
}
