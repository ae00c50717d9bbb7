use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{best_response_attack_obs, minbest_attack_obs, optimal_attack_obs, AttackMap};
use crate::error::{Error, Result};
use crate::mdp::{DetPolicy, QTable, DEFAULT_TOL};

use super::agent::{AgentModel, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackerKind {
    None,
    BestResponse,
    Minbest,
    Optimal,
    /// Uniform over the admissible observations at every step.
    RandomAdmissible,
}

impl AttackerKind {
    pub const ALL: [AttackerKind; 5] = [
        AttackerKind::None,
        AttackerKind::BestResponse,
        AttackerKind::Minbest,
        AttackerKind::Optimal,
        AttackerKind::RandomAdmissible,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackerKind::None => "none",
            AttackerKind::BestResponse => "best-response",
            AttackerKind::Minbest => "minbest",
            AttackerKind::Optimal => "optimal",
            AttackerKind::RandomAdmissible => "random-admissible",
        }
    }
}

impl fmt::Display for AttackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for AttackerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attacker `{s}`")))
    }
}

/// Which observations an attacker may emit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackSpace {
    /// Only observations that are states.
    #[default]
    States,
    /// Every observation, including ones no state maps to.
    Cells,
}

/// An attacker ready to run: true state -> observation.
#[derive(Debug, Clone)]
pub enum Attacker {
    /// Deterministic map into the scenario's observation indices.
    Map(AttackMap),
    /// Uniform draw from each state's admissible observations.
    Random { candidates: Vec<Vec<usize>> },
}

impl Attacker {
    pub fn perturb<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        match self {
            Attacker::Map(map) => map.observed(state),
            Attacker::Random { candidates } => {
                let set = &candidates[state];
                set[rng.random_range(0..set.len())]
            }
        }
    }

    pub fn as_map(&self) -> Option<&AttackMap> {
        match self {
            Attacker::Map(map) => Some(map),
            Attacker::Random { .. } => None,
        }
    }
}

/// Builds the attacker of `kind` with budget `epsilon` against `victim`.
///
/// Planning attackers plan against the victim's stationary rule.
pub fn build_attacker(
    kind: AttackerKind,
    victim: &AgentModel,
    scenario: &Scenario,
    epsilon: f64,
    attack_space: AttackSpace,
    temperature: f64,
) -> Result<Attacker> {
    let full = &scenario.space;
    let ns = scenario.mdp.num_states();
    if kind == AttackerKind::None {
        let map = AttackMap::unchecked((0..ns).map(|s| full.obs_of_state(s)).collect(), epsilon, full.metric_id());
        return Ok(Attacker::Map(map));
    }
    if attack_space == AttackSpace::Cells || full.is_identity() {
        let map = match kind {
            AttackerKind::BestResponse => best_response_attack_obs(&victim.q, victim.policy(), epsilon, full)?,
            AttackerKind::Minbest => minbest_attack_obs(victim.scores(), epsilon, full, temperature)?,
            AttackerKind::Optimal => optimal_attack_obs(&scenario.mdp, victim.policy(), epsilon, full, DEFAULT_TOL)?,
            AttackerKind::RandomAdmissible => {
                let candidates = (0..ns).map(|s| full.observations_within(s, epsilon)).collect();
                return Ok(Attacker::Random { candidates });
            }
            AttackerKind::None => unreachable!(),
        };
        map.check_admissible(full)?;
        return Ok(Attacker::Map(map));
    }

    // plan over states, then translate to observation indices
    let states = scenario.state_space();
    let to_obs = |s: usize| full.obs_of_state(s);
    let map = match kind {
        AttackerKind::BestResponse | AttackerKind::Optimal => {
            let pi = DetPolicy::new((0..ns).map(|s| victim.policy().action(to_obs(s))).collect(), victim.q.num_actions())?;
            if kind == AttackerKind::Optimal {
                optimal_attack_obs(&scenario.mdp, &pi, epsilon, &states, DEFAULT_TOL)?
            } else {
                best_response_attack_obs(&victim.q, &pi, epsilon, &states)?
            }
        }
        AttackerKind::Minbest => {
            let rows = (0..ns).map(|s| victim.scores().row(to_obs(s)).to_vec()).collect();
            minbest_attack_obs(&QTable::from_rows(rows)?, epsilon, &states, temperature)?
        }
        AttackerKind::RandomAdmissible => {
            let candidates = (0..ns)
                .map(|s| states.observations_within(s, epsilon).into_iter().map(to_obs).collect())
                .collect();
            return Ok(Attacker::Random { candidates });
        }
        AttackerKind::None => unreachable!(),
    };
    let map = AttackMap::new(map.as_slice().iter().map(|&s| to_obs(s)).collect(), epsilon, full)?;
    Ok(Attacker::Map(map))
}
