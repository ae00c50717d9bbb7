//! State metrics, perturbation balls and Lipschitz constants.
//!
//! A [`StateMetric`] is any symmetric, nonnegative distance with `d(s,s) = 0`.
//! The triangle inequality is **not** checked or assumed anywhere: none of
//! the bounds computed here need it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Embedded metrics cache all pairwise distances up to this many points.
const CACHE_LIMIT: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// `d = 0` iff equal, else 1.
    Discrete,
    /// Chebyshev distance on coordinates.
    Linf,
    /// Euclidean distance on coordinates.
    L2,
    /// Explicit distance matrix.
    Matrix,
}

impl MetricKind {
    pub fn id(self) -> &'static str {
        match self {
            MetricKind::Discrete => "discrete",
            MetricKind::Linf => "linf",
            MetricKind::L2 => "l2",
            MetricKind::Matrix => "matrix",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Self::Discrete),
            "linf" => Ok(Self::Linf),
            "l2" => Ok(Self::L2),
            "matrix" => Ok(Self::Matrix),
            other => Err(Error::InvalidArgument(format!("unknown metric kind `{other}`"))),
        }
    }
}

/// Distance on a finite point set (states, or observation cells).
#[derive(Debug, Clone, PartialEq)]
pub struct StateMetric {
    kind: MetricKind,
    len: usize,
    coords: Option<Vec<Vec<f64>>>,
    // row-major len x len; always present for Matrix, cached for small embeddings
    table: Option<Vec<f64>>,
}

impl StateMetric {
    pub fn discrete(len: usize) -> Self {
        Self {
            kind: MetricKind::Discrete,
            len,
            coords: None,
            table: None,
        }
    }

    pub fn chebyshev(coords: Vec<Vec<f64>>) -> Result<Self> {
        Self::embedded(MetricKind::Linf, coords)
    }

    pub fn euclidean(coords: Vec<Vec<f64>>) -> Result<Self> {
        Self::embedded(MetricKind::L2, coords)
    }

    fn embedded(kind: MetricKind, coords: Vec<Vec<f64>>) -> Result<Self> {
        let dim = coords.first().map_or(0, Vec::len);
        if coords.iter().any(|c| c.len() != dim || c.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument(
                "coordinates must be finite and share one dimension".into(),
            ));
        }
        let len = coords.len();
        let mut metric = Self {
            kind,
            len,
            coords: Some(coords),
            table: None,
        };
        if len <= CACHE_LIMIT {
            let mut table = Vec::with_capacity(len * len);
            for i in 0..len {
                for j in 0..len {
                    table.push(metric.compute(i, j));
                }
            }
            metric.table = Some(table);
        }
        Ok(metric)
    }

    /// Explicit distance matrix; must be square, symmetric, nonnegative and
    /// zero on the diagonal.
    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != len {
                return Err(Error::InvalidArgument(format!("metric row {i} has length {}", row.len())));
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidArgument(format!("metric diagonal entry {i} is nonzero")));
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidArgument(format!("metric entry ({i},{j}) = {d}")));
                }
                if d != rows[j][i] {
                    return Err(Error::InvalidArgument(format!("metric not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            kind: MetricKind::Matrix,
            len,
            coords: None,
            table: Some(rows.into_iter().flatten().collect()),
        })
    }

    /// Builds the metric of `kind` for an MDP, using its coordinates for
    /// embedded kinds.
    pub fn for_mdp(kind: MetricKind, mdp: &TabularMdp) -> Result<Self> {
        match kind {
            MetricKind::Discrete => Ok(Self::discrete(mdp.num_states())),
            MetricKind::Linf | MetricKind::L2 => {
                let coords = mdp.coordinates().ok_or_else(|| {
                    Error::InvalidArgument(format!("metric `{}` needs MDP coordinates", kind.id()))
                })?;
                Self::embedded(kind, coords.to_vec())
            }
            MetricKind::Matrix => Err(Error::InvalidArgument(
                "matrix metrics must be given explicitly".into(),
            )),
        }
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    /// Number of points the metric is defined on.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn coordinates(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    /// Full distance matrix rows (for serialization of matrix metrics).
    pub fn matrix_rows(&self) -> Option<Vec<Vec<f64>>> {
        match self.kind {
            MetricKind::Matrix => self
                .table
                .as_ref()
                .map(|t| t.chunks(self.len).map(<[f64]>::to_vec).collect()),
            _ => None,
        }
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        if let Some(table) = &self.table {
            return table[i * self.len + j];
        }
        self.compute(i, j)
    }

    fn compute(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            MetricKind::Discrete => {
                if i == j {
                    0.0
                } else {
                    1.0
                }
            }
            MetricKind::Linf => {
                let c = self.coords.as_ref().expect("embedded metric has coordinates");
                c[i].iter()
                    .zip(&c[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            }
            MetricKind::L2 => {
                let c = self.coords.as_ref().expect("embedded metric has coordinates");
                c[i].iter()
                    .zip(&c[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            }
            MetricKind::Matrix => {
                self.table.as_ref().expect("matrix metric has a table")[i * self.len + j]
            }
        }
    }

    /// Points within `epsilon` of point `center`, ascending.
    pub fn within(&self, center: usize, epsilon: f64) -> Vec<usize> {
        (0..self.len)
            .filter(|&j| self.distance(center, j) <= epsilon)
            .collect()
    }
}

/// `B_eps(s) = { s' : d(s, s') <= eps }` in ascending state order.
///
/// Always contains `s` for `epsilon >= 0`.
pub fn ball(metric: &StateMetric, mdp: &TabularMdp, s: usize, epsilon: f64) -> Vec<usize> {
    debug_assert_eq!(metric.len(), mdp.num_states());
    metric.within(s, epsilon)
}

/// Every state's ball, indexed by center.
pub fn all_balls(metric: &StateMetric, mdp: &TabularMdp, epsilon: f64) -> Vec<Vec<usize>> {
    (0..mdp.num_states()).map(|s| ball(metric, mdp, s, epsilon)).collect()
}

/// Reward and transition Lipschitz constants with the pairs that attain them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub l_r: f64,
    pub l_p: f64,
    /// `(s1, s2, a)` attaining `l_r`, if any pair varies.
    pub reward_witness: Option<(usize, usize, usize)>,
    /// `(s1, s2, a, s')` attaining `l_p`, if any pair varies.
    pub transition_witness: Option<(usize, usize, usize, usize)>,
}

/// Tightest `l_r`, `l_p` with `|R(s1,a)-R(s2,a)| <= l_r d(s1,s2)` and
/// `|P(s'|s1,a)-P(s'|s2,a)| <= l_p d(s1,s2)`, by exhaustive scan.
pub fn lipschitz_constants(mdp: &TabularMdp, metric: &StateMetric) -> Result<LipschitzConstants> {
    let n = mdp.num_states();
    if metric.len() != n {
        return Err(Error::InvalidArgument(format!(
            "metric covers {} points, MDP has {n} states",
            metric.len()
        )));
    }
    let mut out = LipschitzConstants {
        l_r: 0.0,
        l_p: 0.0,
        reward_witness: None,
        transition_witness: None,
    };
    for s1 in 0..n {
        for s2 in 0..n {
            if s1 == s2 {
                continue;
            }
            let d = metric.distance(s1, s2);
            if d <= 0.0 {
                return Err(Error::DegenerateMetric(s1.min(s2), s1.max(s2)));
            }
            for a in 0..mdp.num_actions() {
                let ratio = (mdp.reward(s1, a) - mdp.reward(s2, a)).abs() / d;
                if ratio > out.l_r {
                    out.l_r = ratio;
                    out.reward_witness = Some((s1, s2, a));
                }
                let (r1, r2) = (mdp.transition_row(s1, a), mdp.transition_row(s2, a));
                for next in 0..n {
                    let ratio = (r1[next] - r2[next]).abs() / d;
                    if ratio > out.l_p {
                        out.l_p = ratio;
                        out.transition_witness = Some((s1, s2, a, next));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Lipschitz constant of `Q^pi` in the state argument:
/// `l_r + r_max / (1 - gamma) * |S| * l_p`.
pub fn q_lipschitz_bound(consts: &LipschitzConstants, num_states: usize, r_max: f64, gamma: f64) -> f64 {
    consts.l_r + (r_max / (1.0 - gamma)) * num_states as f64 * consts.l_p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(rewards: &[f64]) -> TabularMdp {
        let n = rewards.len();
        let transition = (0..n)
            .map(|s| {
                let mut row = vec![0.0; n];
                row[(s + 1).min(n - 1)] = 1.0;
                vec![row]
            })
            .collect();
        let reward = rewards.iter().map(|&r| vec![r]).collect();
        TabularMdp::new(transition, reward, 0.9)
            .unwrap()
            .with_coordinates((0..n).map(|s| vec![s as f64]).collect())
            .unwrap()
    }

    #[test]
    fn zero_radius_is_singleton() {
        let mdp = chain(&[0.0, 1.0, 2.0]);
        let m = StateMetric::for_mdp(MetricKind::Linf, &mdp).unwrap();
        assert_eq!(ball(&m, &mdp, 1, 0.0), vec![1]);
        assert_eq!(ball(&m, &mdp, 1, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn discrete_metric_balls() {
        let mdp = chain(&[0.0, 0.0, 0.0, 0.0]);
        let m = StateMetric::discrete(4);
        assert_eq!(ball(&m, &mdp, 2, 0.5), vec![2]);
        assert_eq!(ball(&m, &mdp, 2, 1.0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn unit_slope_reward() {
        let mdp = chain(&[0.0, 1.0, 2.0]);
        let m = StateMetric::for_mdp(MetricKind::Linf, &mdp).unwrap();
        let c = lipschitz_constants(&mdp, &m).unwrap();
        assert_eq!(c.l_r, 1.0);
        assert_eq!(c.reward_witness, Some((0, 1, 0)));
    }

    #[test]
    fn constant_mdp_has_zero_constants() {
        let t = vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]];
        let mdp = TabularMdp::new(t, vec![vec![2.0], vec![2.0]], 0.9).unwrap();
        let c = lipschitz_constants(&mdp, &StateMetric::discrete(2)).unwrap();
        assert_eq!((c.l_r, c.l_p), (0.0, 0.0));
        assert!(c.reward_witness.is_none() && c.transition_witness.is_none());
    }

    #[test]
    fn zero_distance_between_distinct_states_rejected() {
        let mdp = chain(&[0.0, 1.0]);
        let m = StateMetric::matrix(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(lipschitz_constants(&mdp, &m), Err(Error::DegenerateMetric(0, 1))));
    }

    #[test]
    fn q_lipschitz_substitution() {
        let c = LipschitzConstants {
            l_r: 1.0,
            l_p: 0.1,
            reward_witness: None,
            transition_witness: None,
        };
        assert!((q_lipschitz_bound(&c, 10, 1.0, 0.9) - 11.0).abs() < 1e-12);
        let c0 = LipschitzConstants { l_p: 0.0, ..c };
        assert_eq!(q_lipschitz_bound(&c0, 10, 1.0, 0.9), 1.0);
    }

    #[test]
    fn matrix_validation() {
        assert!(StateMetric::matrix(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(StateMetric::matrix(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(StateMetric::matrix(vec![vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
        let m = StateMetric::matrix(vec![vec![0.0, 3.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(m.distance(0, 1), 3.0);
    }

    #[test]
    fn euclidean_distance() {
        let m = StateMetric::euclidean(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.distance(0, 1), 5.0);
        let c = StateMetric::chebyshev(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(c.distance(1, 0), 4.0);
    }
}
