use crate::mdp::{QTable, TabularMdp};
use crate::metric::StateMetric;

/// Three-state, three-action MDP on which the pessimistic update with
/// re-derived policies fails to be a contraction.
#[derive(Debug, Clone)]
pub struct CounterexampleFixture {
    /// Every transition lands in `s2` (index 1); rewards are zero; gamma 0.95.
    pub mdp: TabularMdp,
    /// Discrete metric; with `epsilon = 1` every ball is the whole space.
    pub metric: StateMetric,
    pub epsilon: f64,
    pub q1: QTable,
    pub q2: QTable,
}

pub fn counterexample_fixture() -> CounterexampleFixture {
    let to_s2 = vec![0.0, 1.0, 0.0];
    let transition = vec![vec![to_s2; 3]; 3];
    let mdp = TabularMdp::new(transition, vec![vec![0.0; 3]; 3], 0.95).expect("fixture MDP is valid");
    let q1 = QTable::from_rows(vec![
        vec![12.0, 12.0, 12.0],
        vec![11.0, 10.0, 8.0],
        vec![3.0, 2.0, 1.0],
    ])
    .expect("fixture table is valid");
    let q2 = QTable::from_rows(vec![
        vec![4.0, 4.0, 4.0],
        vec![2.0, 0.0, 1.0],
        vec![-2.0, -1.0, -3.0],
    ])
    .expect("fixture table is valid");
    CounterexampleFixture {
        mdp,
        metric: StateMetric::discrete(3),
        epsilon: 1.0,
        q1,
        q2,
    }
}
