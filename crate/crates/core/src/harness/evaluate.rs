use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{value_iteration, QTable, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::pessimist::pessimistic_q_iteration;

use super::agent::{AgentKind, AgentModel, Scenario};
use super::attacker::{build_attacker, AttackerKind};
use super::config::ExperimentConfig;
use super::episode::{run_episode, Trajectory};

/// Seed for one episode of one cell: SHA-256 of the master seed, agent,
/// attacker, budget and episode index. Without an attacker the budget does
/// not enter, so unattacked cells share episodes across budgets.
pub fn derive_seed(master: u64, agent: AgentKind, attacker: AttackerKind, epsilon: f64, episode: usize) -> u64 {
    let eps = if attacker == AttackerKind::None { 0.0 } else { epsilon };
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(agent.name().as_bytes());
    h.update([0]);
    h.update(attacker.name().as_bytes());
    h.update([0]);
    h.update(eps.to_bits().to_le_bytes());
    h.update((episode as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates for one (agent, attacker, epsilon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub agent: AgentKind,
    pub attacker: AttackerKind,
    pub epsilon: f64,
    /// Budget the agent was trained for and assumes.
    pub training_epsilon: f64,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub steps: usize,
    pub perturbed: usize,
    pub invalid: usize,
    /// Share of perturbed observations that are not valid states.
    pub invalid_fraction: f64,
    pub mean_belief_size: f64,
    pub max_belief_size: usize,
    pub fallbacks: usize,
    pub seconds: f64,
    /// Set when the cell failed; the other fields are then empty.
    pub error: Option<String>,
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

impl CellResult {
    pub fn std_error(&self) -> f64 {
        self.std / (self.returns.len() as f64).sqrt()
    }

    fn failed(agent: AgentKind, attacker: AttackerKind, epsilon: f64, training_epsilon: f64, error: String, seconds: f64) -> Self {
        Self {
            agent,
            attacker,
            epsilon,
            training_epsilon,
            returns: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            steps: 0,
            perturbed: 0,
            invalid: 0,
            invalid_fraction: f64::NAN,
            mean_belief_size: f64::NAN,
            max_belief_size: 0,
            fallbacks: 0,
            seconds,
            error: Some(error),
            trajectories: Vec::new(),
        }
    }
}

/// How a policy used in the run was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub agent: AgentKind,
    pub epsilon: f64,
    pub training_epsilon: f64,
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub policies: Vec<PolicyRecord>,
    pub seconds: f64,
}

impl EvalResult {
    pub fn cell(&self, agent: AgentKind, attacker: AttackerKind, epsilon: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.agent == agent && c.attacker == attacker && c.epsilon == epsilon)
    }

    /// Writes `results.csv`, `summary.csv`, `timings.csv`, `manifest.toml`
    /// and, when enabled, per-episode trajectory logs. With `structured`,
    /// also `summary.toml`.
    pub fn write(&self, out_dir: &Path, structured: bool) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        fs::write(out_dir.join("results.csv"), self.results_csv()?)?;
        fs::write(out_dir.join("summary.csv"), self.summary_csv()?)?;
        fs::write(out_dir.join("manifest.toml"), self.manifest())?;

        let mut timings = csv::Writer::from_path(out_dir.join("timings.csv"))?;
        timings.write_record(["agent", "attacker", "epsilon", "seconds"])?;
        for c in &self.cells {
            timings.write_record([c.agent.name(), c.attacker.name(), &c.epsilon.to_string(), &c.seconds.to_string()])?;
        }
        timings.flush()?;

        if structured {
            #[derive(Serialize)]
            struct Summary<'a> {
                cells: &'a [CellResult],
            }
            let text = toml::to_string(&Summary { cells: &self.cells })
                .map_err(|e| Error::Internal(format!("summary serialization: {e}")))?;
            fs::write(out_dir.join("summary.toml"), text)?;
        }

        if self.config.trajectories {
            let dir = out_dir.join("trajectories");
            fs::create_dir_all(&dir)?;
            for c in self.cells.iter().filter(|c| c.error.is_none()) {
                let name = format!("{}_{}_{}.csv", c.agent, c.attacker, c.epsilon);
                let mut w = csv::Writer::from_path(dir.join(name))?;
                w.write_record(["episode", "t", "state", "observed", "belief", "action", "reward"])?;
                for (e, traj) in c.trajectories.iter().enumerate() {
                    for r in &traj.steps {
                        let belief = r.belief.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                        w.write_record([
                            e.to_string(),
                            r.t.to_string(),
                            r.state.to_string(),
                            r.observed.to_string(),
                            belief,
                            r.action.to_string(),
                            r.reward.to_string(),
                        ])?;
                    }
                }
                w.flush()?;
            }
        }
        Ok(())
    }

    /// `agent,attacker,epsilon,episode,return`, one row per episode of every
    /// successful cell.
    pub fn results_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["agent", "attacker", "epsilon", "episode", "return"])?;
        for c in &self.cells {
            for (e, r) in c.returns.iter().enumerate() {
                w.write_record([c.agent.name(), c.attacker.name(), &c.epsilon.to_string(), &e.to_string(), &r.to_string()])?;
            }
        }
        into_string(w)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "agent",
            "attacker",
            "epsilon",
            "training_epsilon",
            "episodes",
            "mean",
            "std",
            "invalid_fraction",
            "mean_belief_size",
            "max_belief_size",
            "fallbacks",
            "error",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.agent.name().to_string(),
                c.attacker.name().to_string(),
                c.epsilon.to_string(),
                c.training_epsilon.to_string(),
                c.returns.len().to_string(),
                c.mean.to_string(),
                c.std.to_string(),
                c.invalid_fraction.to_string(),
                c.mean_belief_size.to_string(),
                c.max_belief_size.to_string(),
                c.fallbacks.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        into_string(w)
    }

    /// Structured-text run manifest: artifact version, the full config and
    /// the training budget of every policy.
    pub fn manifest(&self) -> String {
        #[derive(Serialize)]
        struct Manifest<'a> {
            version: &'static str,
            config: &'a ExperimentConfig,
            policies: &'a [PolicyRecord],
        }
        toml::to_string(&Manifest {
            version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            policies: &self.policies,
        })
        .expect("manifest serializes")
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Trains (or loads from cache) the table behind an agent.
#[derive(Debug, Default)]
pub struct TableCache {
    tables: BTreeMap<(bool, u64), QTable>,
}

impl TableCache {
    pub fn table(&mut self, scenario: &Scenario, pessimistic: bool, epsilon: f64, iterations: usize) -> Result<&QTable> {
        let key = (pessimistic, epsilon.to_bits());
        if !self.tables.contains_key(&key) {
            let q = if pessimistic {
                pessimistic_q_iteration(&scenario.mdp, epsilon, &scenario.state_metric, iterations)?.final_q
            } else {
                value_iteration(&scenario.mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?
            };
            self.tables.insert(key, q);
        }
        Ok(&self.tables[&key])
    }
}

/// Runs the full agent x attacker x epsilon matrix. Cells run in parallel;
/// a failing cell is recorded and the rest carry on.
pub fn evaluate(config: &ExperimentConfig) -> Result<EvalResult> {
    config.validate()?;
    let started = Instant::now();
    let scenario = config.scenario()?;

    // train every distinct table once
    let mut keys: Vec<(bool, u64)> = Vec::new();
    for &agent in &config.agents {
        for &eps in &config.epsilons {
            let key = (agent.is_pessimistic(), config.training_epsilon(agent, eps).to_bits());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    let trained: Vec<((bool, u64), Result<QTable>)> = keys
        .par_iter()
        .map(|&(pess, bits)| {
            let mut cache = TableCache::default();
            let q = cache
                .table(&scenario, pess, f64::from_bits(bits), config.iterations)
                .cloned();
            ((pess, bits), q)
        })
        .collect();
    let tables: BTreeMap<(bool, u64), std::result::Result<QTable, String>> = trained
        .into_iter()
        .map(|(k, q)| (k, q.map_err(|e| e.to_string())))
        .collect();

    let mut policies = Vec::new();
    let mut jobs = Vec::new();
    for &agent in &config.agents {
        for &eps in &config.epsilons {
            let training = config.training_epsilon(agent, eps);
            policies.push(PolicyRecord {
                agent,
                epsilon: eps,
                training_epsilon: training,
                source: if agent.is_pessimistic() {
                    format!("pessimistic-q-iteration/{}", config.iterations)
                } else {
                    "value-iteration".into()
                },
            });
            for &attacker in &config.attackers {
                jobs.push((agent, attacker, eps, training));
            }
        }
    }

    let cells = jobs
        .par_iter()
        .map(|&(agent, attacker, eps, training)| {
            let t0 = Instant::now();
            let run = || -> Result<CellResult> {
                let q = tables[&(agent.is_pessimistic(), training.to_bits())]
                    .clone()
                    .map_err(Error::Internal)?;
                let model = AgentModel::new(agent, q, training, config.kappa_d, &scenario)?;
                let adversary = build_attacker(attacker, &model, &scenario, eps, config.attack_space, config.temperature)?;
                let mut trajectories = Vec::with_capacity(config.episodes);
                for e in 0..config.episodes {
                    let seed = derive_seed(config.seed, agent, attacker, eps, e);
                    trajectories.push(run_episode(&scenario, &model, &adversary, eps, scenario.horizon, seed)?);
                }
                Ok(aggregate(agent, attacker, eps, training, trajectories, config.trajectories))
            };
            match run() {
                Ok(mut cell) => {
                    cell.seconds = t0.elapsed().as_secs_f64();
                    cell
                }
                Err(e) => CellResult::failed(agent, attacker, eps, training, e.to_string(), t0.elapsed().as_secs_f64()),
            }
        })
        .collect();

    Ok(EvalResult {
        config: config.clone(),
        cells,
        policies,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn aggregate(
    agent: AgentKind,
    attacker: AttackerKind,
    epsilon: f64,
    training_epsilon: f64,
    trajectories: Vec<Trajectory>,
    keep: bool,
) -> CellResult {
    let returns: Vec<f64> = trajectories.iter().map(|t| t.total_return).collect();
    let (mean, std) = mean_std(&returns);
    let steps: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    let perturbed: usize = trajectories.iter().map(|t| t.perturbed).sum();
    let invalid: usize = trajectories.iter().map(|t| t.invalid).sum();
    let belief_total: usize = trajectories.iter().flat_map(|t| t.steps.iter().map(|r| r.belief.len())).sum();
    CellResult {
        agent,
        attacker,
        epsilon,
        training_epsilon,
        mean,
        std,
        steps,
        perturbed,
        invalid,
        invalid_fraction: if perturbed == 0 { 0.0 } else { invalid as f64 / perturbed as f64 },
        mean_belief_size: if steps == 0 { 0.0 } else { belief_total as f64 / steps as f64 },
        max_belief_size: trajectories.iter().map(Trajectory::max_belief_size).max().unwrap_or(0),
        fallbacks: trajectories.iter().map(|t| t.fallbacks).sum(),
        seconds: 0.0,
        error: None,
        returns,
        trajectories: if keep { trajectories } else { Vec::new() },
    }
}
