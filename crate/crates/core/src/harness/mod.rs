//! Episode simulation, the attack-evaluation matrix, property-check suites
//! and reporting.

mod agent;
mod attacker;
mod config;
mod episode;
mod evaluate;
mod solve;
mod verify;

pub use agent::{AgentKind, AgentModel, AgentRun, Scenario};
pub use attacker::{build_attacker, AttackSpace, Attacker, AttackerKind};
pub use config::{EnvironmentConfig, ExperimentConfig, Fixture, RandomEnvironment};
pub use episode::{run_episode, StepRecord, Trajectory};
pub use evaluate::{derive_seed, evaluate, mean_std, CellResult, EvalResult, PolicyRecord, TableCache};
pub use solve::{bench, q_table_csv, solve, train, write_bench, write_tables, BenchRow, SolvedTable};
pub use verify::{
    check_attacker_oracle, check_belief_soundness, check_contraction, check_counterexample, check_epsilon_zero,
    check_lemma2, check_lipschitz, check_theorem1, counterexample_values, verify_suite, write_reports, CheckKind, CheckReport,
};
