//! MDP files.
//!
//! An MDP file is a TOML document:
//!
//! ```toml
//! num_states = 2
//! num_actions = 1
//! discount = 0.9
//! transition = [[[0.0, 1.0]], [[0.0, 1.0]]]   # [s][a][s']
//! reward = [[1.0], [0.0]]                      # [s][a]
//! initial_states = [0]
//! terminal_states = [1]
//! coordinates = [[0.0], [1.0]]                 # optional
//!
//! [metric]                                     # optional
//! kind = "linf"
//! ```
//!
//! Validation errors name the line of the offending value.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::metric::{MetricKind, StateMetric};

const ROW_SUM_TOL: f64 = 1e-12;

/// A parsed MDP file.
#[derive(Debug, Clone)]
pub struct MdpDocument {
    pub mdp: TabularMdp,
    /// Metric named in the file, if any.
    pub metric: Option<StateMetric>,
}

type Row = Spanned<Vec<f64>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    num_states: Spanned<usize>,
    num_actions: Spanned<usize>,
    discount: Spanned<f64>,
    transition: Spanned<Vec<Spanned<Vec<Row>>>>,
    reward: Spanned<Vec<Row>>,
    initial_states: Option<Spanned<Vec<usize>>>,
    terminal_states: Option<Spanned<Vec<usize>>>,
    coordinates: Option<Spanned<Vec<Row>>>,
    metric: Option<Spanned<RawMetric>>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    kind: MetricKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct OutMdp<'a> {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    transition: Vec<Vec<&'a [f64]>>,
    reward: Vec<Vec<f64>>,
    initial_states: &'a [usize],
    terminal_states: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coordinates: Option<&'a [Vec<f64>]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metric: Option<RawMetric>,
}

struct Locator<'a> {
    path: &'a str,
    text: &'a str,
}

impl Locator<'_> {
    fn line(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Range<usize>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line(span.start),
            message: message.into(),
        }
    }
}

/// Parses an MDP document. `path` only labels error messages.
pub fn parse_mdp(text: &str, path: &str) -> Result<MdpDocument> {
    let loc = Locator { path, text };
    let raw: RawMdp = toml::from_str(text).map_err(|e| {
        let span = e.span().unwrap_or(0..0);
        loc.err(span, e.message().to_string())
    })?;

    let ns = *raw.num_states.get_ref();
    let na = *raw.num_actions.get_ref();
    if ns == 0 {
        return Err(loc.err(raw.num_states.span(), "num_states must be positive"));
    }
    if na == 0 {
        return Err(loc.err(raw.num_actions.span(), "num_actions must be positive"));
    }
    let gamma = *raw.discount.get_ref();
    if !(0.0..1.0).contains(&gamma) {
        return Err(loc.err(raw.discount.span(), format!("discount {gamma} not in [0, 1)")));
    }

    let transition = raw.transition.get_ref();
    if transition.len() != ns {
        return Err(loc.err(
            raw.transition.span(),
            format!("transition has {} states, expected {ns}", transition.len()),
        ));
    }
    let mut flat_p = Vec::with_capacity(ns * na * ns);
    for (s, per_state) in transition.iter().enumerate() {
        if per_state.get_ref().len() != na {
            return Err(loc.err(
                per_state.span(),
                format!("transition[{s}] has {} actions, expected {na}", per_state.get_ref().len()),
            ));
        }
        for (a, row) in per_state.get_ref().iter().enumerate() {
            let values = row.get_ref();
            if values.len() != ns {
                return Err(loc.err(
                    row.span(),
                    format!("transition[{s}][{a}] has {} entries, expected {ns}", values.len()),
                ));
            }
            if let Some(p) = values.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(loc.err(row.span(), format!("transition[{s}][{a}] has invalid probability {p}")));
            }
            let total: f64 = values.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(loc.err(row.span(), format!("transition[{s}][{a}] sums to {total}, expected 1")));
            }
            flat_p.extend_from_slice(values);
        }
    }

    let reward = raw.reward.get_ref();
    if reward.len() != ns {
        return Err(loc.err(raw.reward.span(), format!("reward has {} rows, expected {ns}", reward.len())));
    }
    let mut flat_r = Vec::with_capacity(ns * na);
    for (s, row) in reward.iter().enumerate() {
        if row.get_ref().len() != na {
            return Err(loc.err(
                row.span(),
                format!("reward[{s}] has {} entries, expected {na}", row.get_ref().len()),
            ));
        }
        if row.get_ref().iter().any(|r| !r.is_finite()) {
            return Err(loc.err(row.span(), format!("reward[{s}] has a non-finite entry")));
        }
        flat_r.extend_from_slice(row.get_ref());
    }

    let mut mdp = TabularMdp::from_flat(ns, na, flat_p, flat_r, gamma)
        .map_err(|e| loc.err(raw.transition.span(), e.to_string()))?;
    if let Some(init) = &raw.initial_states {
        mdp = mdp
            .with_initial_states(init.get_ref().clone())
            .map_err(|e| loc.err(init.span(), e.to_string()))?;
    }
    if let Some(term) = &raw.terminal_states {
        mdp = mdp
            .with_terminal_states(term.get_ref().clone())
            .map_err(|e| loc.err(term.span(), e.to_string()))?;
    }
    if let Some(coords) = &raw.coordinates {
        let rows = coords.get_ref();
        if rows.len() != ns {
            return Err(loc.err(coords.span(), format!("coordinates has {} rows, expected {ns}", rows.len())));
        }
        let dim = rows[0].get_ref().len();
        for (s, row) in rows.iter().enumerate() {
            if row.get_ref().len() != dim {
                return Err(loc.err(row.span(), format!("coordinates[{s}] has dimension {}, expected {dim}", row.get_ref().len())));
            }
            if row.get_ref().iter().any(|x| !x.is_finite()) {
                return Err(loc.err(row.span(), format!("coordinates[{s}] has a non-finite entry")));
            }
        }
        mdp = mdp
            .with_coordinates(rows.iter().map(|r| r.get_ref().clone()).collect())
            .map_err(|e| loc.err(coords.span(), e.to_string()))?;
    }

    let metric = match &raw.metric {
        None => None,
        Some(m) => {
            let spec = m.get_ref();
            let built = match (spec.kind, &spec.matrix) {
                (MetricKind::Matrix, Some(rows)) => {
                    if rows.len() != ns {
                        return Err(loc.err(m.span(), format!("metric matrix has {} rows, expected {ns}", rows.len())));
                    }
                    StateMetric::matrix(rows.clone())
                }
                (MetricKind::Matrix, None) => return Err(loc.err(m.span(), "matrix metric needs a `matrix` table")),
                (_, Some(_)) => return Err(loc.err(m.span(), "`matrix` is only allowed with kind = \"matrix\"")),
                (kind, None) => StateMetric::for_mdp(kind, &mdp),
            };
            Some(built.map_err(|e| loc.err(m.span(), e.to_string()))?)
        }
    };
    Ok(MdpDocument { mdp, metric })
}

/// Reads and parses an MDP file.
pub fn load_mdp(path: impl AsRef<Path>) -> Result<MdpDocument> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_mdp(&text, &path.display().to_string())
}

/// Serializes an MDP (and optionally its metric) to the file format.
pub fn mdp_to_toml(mdp: &TabularMdp, metric: Option<&StateMetric>) -> String {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let out = OutMdp {
        num_states: ns,
        num_actions: na,
        discount: mdp.discount(),
        transition: (0..ns).map(|s| (0..na).map(|a| mdp.transition_row(s, a)).collect()).collect(),
        reward: (0..ns).map(|s| (0..na).map(|a| mdp.reward(s, a)).collect()).collect(),
        initial_states: mdp.initial_states(),
        terminal_states: mdp.terminal_states(),
        coordinates: mdp.coordinates(),
        metric: metric.map(|m| RawMetric {
            kind: m.kind(),
            matrix: m.matrix_rows().filter(|_| m.kind() == MetricKind::Matrix),
        }),
    };
    toml::to_string(&out).expect("MDP tables serialize")
}

pub fn save_mdp(path: impl AsRef<Path>, mdp: &TabularMdp, metric: Option<&StateMetric>) -> Result<()> {
    std::fs::write(path, mdp_to_toml(mdp, metric))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_STATE: &str = r#"num_states = 2
num_actions = 1
discount = 0.9
transition = [
  [[0.0, 1.0]],
  [[0.0, 1.0]],
]
reward = [[1.0], [0.0]]
initial_states = [0]
terminal_states = [1]
coordinates = [[0.0], [1.0]]
"#;

    #[test]
    fn parses_minimal_file() {
        let doc = parse_mdp(TWO_STATE, "two.toml").unwrap();
        assert_eq!(doc.mdp.num_states(), 2);
        assert_eq!(doc.mdp.initial_states(), &[0]);
        assert!(doc.mdp.is_terminal(1));
        assert!(doc.metric.is_none());
    }

    #[test]
    fn bad_row_reports_its_line() {
        let text = TWO_STATE.replace("[[0.0, 1.0]],\n]", "[[0.5, 0.4]],\n]");
        match parse_mdp(&text, "bad.toml") {
            Err(Error::Parse { path, line, message }) => {
                assert_eq!(path, "bad.toml");
                assert_eq!(line, 6);
                assert!(message.contains("transition[1][0]"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_its_line() {
        let text = TWO_STATE.replace("reward = [[1.0], [0.0]]", "reward = [[1.0], [0.0]");
        match parse_mdp(&text, "x") {
            Err(Error::Parse { line, .. }) => assert!((8..=9).contains(&line), "line {line}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn terminal_without_self_loop_reports_field_line() {
        let text = TWO_STATE.replace("terminal_states = [1]", "terminal_states = [0]");
        match parse_mdp(&text, "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let doc = parse_mdp(TWO_STATE, "x").unwrap();
        let metric = StateMetric::for_mdp(MetricKind::Linf, &doc.mdp).unwrap();
        let text = mdp_to_toml(&doc.mdp, Some(&metric));
        let back = parse_mdp(&text, "y").unwrap();
        assert_eq!(back.mdp, doc.mdp);
        assert_eq!(back.metric.unwrap().kind(), MetricKind::Linf);
    }

    #[test]
    fn matrix_metric_round_trip() {
        let doc = parse_mdp(TWO_STATE, "x").unwrap();
        let metric = StateMetric::matrix(vec![vec![0.0, 2.5], vec![2.5, 0.0]]).unwrap();
        let back = parse_mdp(&mdp_to_toml(&doc.mdp, Some(&metric)), "y").unwrap();
        assert_eq!(back.metric.unwrap().distance(0, 1), 2.5);
    }
}
