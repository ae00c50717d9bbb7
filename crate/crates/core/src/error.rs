use thiserror::Error;

/// Errors raised by the solvers, adversaries and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("state {state} out of range (num_states = {num_states})")]
    StateOutOfRange { state: usize, num_states: usize },

    #[error("action {action} out of range (num_actions = {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("belief set is empty")]
    EmptyBelief,

    #[error("metric assigns zero distance to distinct states {0} and {1}")]
    DegenerateMetric(usize, usize),

    #[error("attack map is not admissible at state {state}: distance {distance} > epsilon {epsilon}")]
    Inadmissible {
        state: usize,
        distance: f64,
        epsilon: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("contract violation at step {step}: {message}")]
    ContractViolation { step: usize, message: String },

    #[error("internal defect: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
