use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{build_gridworld, counterexample_fixture, random_mdp, GridworldSpec, RandomMdpSpec, DEFAULT_GRIDWORLD};
use crate::error::{Error, Result};
use crate::io::load_mdp;
use crate::metric::{MetricKind, StateMetric};
use crate::pessimist::LearningSchedule;
use crate::purifier::ObservationSpace;

use super::agent::{AgentKind, Scenario};
use super::attacker::{AttackSpace, AttackerKind};

/// Built-in environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fixture {
    /// The shipped 10x10 gridworld.
    Gridworld,
    /// The three-state non-contraction example.
    Counterexample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEnvironment {
    #[serde(flatten)]
    pub spec: RandomMdpSpec,
    pub discount: f64,
}

/// Where the MDP comes from. Exactly one source must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<Fixture>,
    /// Gridworld spec file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gridworld: Option<PathBuf>,
    /// MDP file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomEnvironment>,
    /// Overrides the environment's own metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
}

mod defaults {
    pub fn episodes() -> usize {
        10
    }
    pub fn kappa_d() -> usize {
        25
    }
    pub fn iterations() -> usize {
        500
    }
    pub fn temperature() -> f64 {
        crate::adversary::DEFAULT_TEMPERATURE
    }
}

/// One evaluation run: environment, the agent x attacker x epsilon matrix,
/// episode count and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub epsilons: Vec<f64>,
    pub agents: Vec<AgentKind>,
    pub attackers: Vec<AttackerKind>,
    #[serde(default = "defaults::episodes")]
    pub episodes: usize,
    /// Episode cap; the environment's own horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attack_space: AttackSpace,
    /// Per-agent multiplier on the evaluation epsilon giving the budget the
    /// agent is trained for and assumes. Missing agents use 1.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub epsilon_factors: BTreeMap<AgentKind, f64>,
    /// Candidate count for the purified agent.
    #[serde(default = "defaults::kappa_d")]
    pub kappa_d: usize,
    /// Rounds of pessimistic Q-iteration used to train pessimistic agents.
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// MinBest softmax temperature.
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    /// Write per-episode trajectory logs.
    #[serde(default)]
    pub trajectories: bool,
    /// Q-learning hyperparameters for the `train` command.
    #[serde(default)]
    pub learning: LearningSchedule,
}

/// A manifest embeds the config it was produced from.
#[derive(Deserialize)]
struct ManifestView {
    config: ExperimentConfig,
}

impl ExperimentConfig {
    /// A config on the shipped gridworld with defaults elsewhere.
    pub fn gridworld(epsilons: Vec<f64>, agents: Vec<AgentKind>, attackers: Vec<AttackerKind>) -> Self {
        Self {
            environment: EnvironmentConfig {
                fixture: Some(Fixture::Gridworld),
                ..Default::default()
            },
            epsilons,
            agents,
            attackers,
            episodes: defaults::episodes(),
            horizon: None,
            seed: 0,
            attack_space: AttackSpace::States,
            epsilon_factors: BTreeMap::new(),
            kappa_d: defaults::kappa_d(),
            iterations: defaults::iterations(),
            temperature: defaults::temperature(),
            trajectories: false,
            learning: LearningSchedule::default(),
        }
    }

    /// Parses a config, or the config embedded in a run manifest. Relative
    /// file paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        let mut config: Self = if table.contains_key("config") {
            toml::from_str::<ManifestView>(text)
                .map_err(|e| Error::InvalidArgument(format!("manifest: {e}")))?
                .config
        } else {
            toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?
        };
        for path in [&mut config.environment.gridworld, &mut config.environment.mdp].into_iter().flatten() {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("config: {msg}")));
        let env = &self.environment;
        let sources = [
            env.fixture.is_some(),
            env.gridworld.is_some(),
            env.mdp.is_some(),
            env.random.is_some(),
        ];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return bad("environment needs exactly one of `fixture`, `gridworld`, `mdp`, `random`".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be at least 1".into());
        }
        if self.horizon == Some(0) {
            return bad("horizon must be at least 1".into());
        }
        if self.epsilons.is_empty() || self.agents.is_empty() || self.attackers.is_empty() {
            return bad("epsilons, agents and attackers must be nonempty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return bad(format!("epsilon {e} must be finite and nonnegative"));
        }
        if let Some((a, f)) = self.epsilon_factors.iter().find(|(_, f)| !f.is_finite() || **f < 0.0) {
            return bad(format!("epsilon factor {f} for {a} must be finite and nonnegative"));
        }
        if self.kappa_d == 0 || self.iterations == 0 {
            return bad("kappa_d and iterations must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        self.learning.validate()?;
        Ok(())
    }

    /// Budget `agent` is trained for at evaluation budget `epsilon`.
    pub fn training_epsilon(&self, agent: AgentKind, epsilon: f64) -> f64 {
        match agent {
            AgentKind::VanillaGreedy => 0.0,
            _ => epsilon * self.epsilon_factors.get(&agent).copied().unwrap_or(1.0),
        }
    }

    /// Resolves the environment.
    pub fn scenario(&self) -> Result<Scenario> {
        let env = &self.environment;
        let mut scenario = if let Some(fixture) = env.fixture {
            match fixture {
                Fixture::Gridworld => gridworld_scenario("gridworld", DEFAULT_GRIDWORLD, env.metric)?,
                Fixture::Counterexample => {
                    let fx = counterexample_fixture();
                    let metric = match env.metric {
                        Some(kind) => StateMetric::for_mdp(kind, &fx.mdp)?,
                        None => fx.metric,
                    };
                    Scenario::from_mdp("counterexample", fx.mdp, metric, 10)?
                }
            }
        } else if let Some(path) = &env.gridworld {
            let text = std::fs::read_to_string(path)?;
            gridworld_scenario(&path.display().to_string(), &text, env.metric)?
        } else if let Some(path) = &env.mdp {
            let doc = load_mdp(path)?;
            let metric = match (env.metric, doc.metric) {
                (Some(kind), _) => StateMetric::for_mdp(kind, &doc.mdp)?,
                (None, Some(m)) => m,
                (None, None) => StateMetric::discrete(doc.mdp.num_states()),
            };
            Scenario::from_mdp(&path.display().to_string(), doc.mdp, metric, 100)?
        } else if let Some(random) = &env.random {
            let mdp = random_mdp(&random.spec, random.discount)?;
            let metric = StateMetric::for_mdp(env.metric.unwrap_or(MetricKind::Discrete), &mdp)?;
            Scenario::from_mdp("random", mdp, metric, 100)?
        } else {
            unreachable!("validated")
        };
        if let Some(h) = self.horizon {
            scenario.horizon = h;
        }
        Ok(scenario)
    }
}

fn gridworld_scenario(name: &str, text: &str, metric: Option<MetricKind>) -> Result<Scenario> {
    let grid = build_gridworld(&GridworldSpec::from_toml(text)?)?;
    let mut scenario = Scenario::from_gridworld(name, &grid);
    match metric {
        None | Some(MetricKind::Linf) => {}
        Some(MetricKind::L2) => {
            let cells = (0..grid.num_cells())
                .map(|o| {
                    let (c, r) = grid.cell_of_observation(o);
                    vec![c as f64, r as f64]
                })
                .collect();
            let state_obs = (0..grid.mdp.num_states()).map(|s| grid.observation_at(grid.cell_of_state(s))).collect();
            scenario.space = ObservationSpace::new(StateMetric::euclidean(cells)?, state_obs)?;
            scenario.state_metric = StateMetric::for_mdp(MetricKind::L2, &grid.mdp)?;
        }
        Some(other) => {
            return Err(Error::InvalidArgument(format!(
                "gridworld supports the linf and l2 metrics, not {}",
                other.id()
            )))
        }
    }
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
epsilons = [1.0]
agents = ["vanilla-greedy", "ball-pessimist"]
attackers = ["none", "optimal"]

[environment]
fixture = "gridworld"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.episodes, 10);
        assert_eq!(c.kappa_d, 25);
        assert_eq!(c.attack_space, AttackSpace::States);
        assert_eq!(c.agents, vec![AgentKind::VanillaGreedy, AgentKind::BallPessimist]);
        assert_eq!(c.scenario().unwrap().horizon, 100);
    }

    #[test]
    fn round_trips_and_reads_manifests() {
        let mut c = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        c.epsilon_factors.insert(AgentKind::BallPessimist, 0.5);
        let back = ExperimentConfig::from_toml(&c.to_toml(), Path::new(".")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.training_epsilon(AgentKind::BallPessimist, 2.0), 1.0);
        assert_eq!(back.training_epsilon(AgentKind::VanillaGreedy, 2.0), 0.0);

        let mut manifest = toml::Table::new();
        manifest.insert("version".into(), "x".into());
        manifest.insert("config".into(), toml::Value::try_from(&c).unwrap());
        let text = toml::to_string(&manifest).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, Path::new(".")).unwrap(), c);
    }

    #[test]
    fn rejects_invalid() {
        let zero = MINIMAL.replace("epsilons", "episodes = 0\nepsilons");
        assert!(ExperimentConfig::from_toml(&zero, Path::new(".")).is_err());
        let unknown = MINIMAL.replace("vanilla-greedy", "clairvoyant");
        assert!(ExperimentConfig::from_toml(&unknown, Path::new(".")).is_err());
        let two = MINIMAL.replace("fixture = \"gridworld\"", "fixture = \"gridworld\"\nmdp = \"x.toml\"");
        assert!(ExperimentConfig::from_toml(&two, Path::new(".")).is_err());
    }
}
