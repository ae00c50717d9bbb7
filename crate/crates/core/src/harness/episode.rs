use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::agent::{AgentModel, Scenario};
use super::attacker::Attacker;

/// One simulated step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: usize,
    pub observed: usize,
    /// States the agent considered possible.
    pub belief: Vec<usize>,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Undiscounted sum of rewards.
    pub total_return: f64,
    /// Steps where the observation differed from the true state.
    pub perturbed: usize,
    /// Perturbed steps whose observation is not a valid state.
    pub invalid: usize,
    pub fallbacks: usize,
    pub reached_terminal: bool,
}

impl Trajectory {
    pub fn mean_belief_size(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|r| r.belief.len() as f64).sum::<f64>() / self.steps.len() as f64
    }

    pub fn max_belief_size(&self) -> usize {
        self.steps.iter().map(|r| r.belief.len()).max().unwrap_or(0)
    }
}

/// Simulates one episode: the attacker perturbs every true state (the first
/// one included), the agent acts on the observation, and the environment
/// moves on the true state. Stops at a terminal state or after `horizon`
/// steps.
///
/// Every observation is audited against `epsilon`; an inadmissible one
/// aborts with a contract violation naming the step.
pub fn run_episode(
    scenario: &Scenario,
    agent: &AgentModel,
    attacker: &Attacker,
    epsilon: f64,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mdp = &scenario.mdp;
    let space = &scenario.space;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = mdp.initial_states();
    let mut s = starts[rng.random_range(0..starts.len())];
    let mut run = agent.start_episode();
    let mut traj = Trajectory {
        steps: Vec::new(),
        total_return: 0.0,
        perturbed: 0,
        invalid: 0,
        fallbacks: 0,
        reached_terminal: mdp.is_terminal(s),
    };
    for t in 0..horizon {
        if mdp.is_terminal(s) {
            traj.reached_terminal = true;
            break;
        }
        let observed = attacker.perturb(s, &mut rng);
        if observed >= space.num_observations() {
            return Err(Error::ContractViolation {
                step: t,
                message: format!("observation {observed} out of range"),
            });
        }
        let distance = space.distance_to_state(observed, s);
        if distance > epsilon {
            return Err(Error::ContractViolation {
                step: t,
                message: format!("attacker showed {observed} for state {s}: distance {distance} > epsilon {epsilon}"),
            });
        }
        if observed != space.obs_of_state(s) {
            traj.perturbed += 1;
            if !scenario.valid.is_valid_observation(space, observed) {
                traj.invalid += 1;
            }
        }
        let (action, belief) = run
            .act(mdp, space, observed)
            .map_err(|e| Error::ContractViolation { step: t, message: e.to_string() })?;
        let reward = mdp.reward(s, action);
        traj.total_return += reward;
        traj.steps.push(StepRecord {
            t,
            state: s,
            observed,
            belief,
            action,
            reward,
        });
        s = mdp.sample_next(s, action, &mut rng);
    }
    traj.reached_terminal |= mdp.is_terminal(s);
    traj.fallbacks = run.fallbacks();
    Ok(traj)
}
