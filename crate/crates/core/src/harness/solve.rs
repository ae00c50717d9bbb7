use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversary::optimal_attack;
use crate::error::{Error, Result};
use crate::mdp::{greedy_policy, value_iteration, DetPolicy, QTable, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::pessimist::{maximin_policy, pessimistic_q_iteration, pessimistic_q_learning};

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EvalResult};

/// A trained table with the state-indexed policy it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedTable {
    /// `optimal`, `pessimistic` or `q-learning`.
    pub method: String,
    pub epsilon: f64,
    pub q: QTable,
    pub policy: DetPolicy,
    pub seconds: f64,
}

/// Value iteration plus pessimistic Q-iteration at every configured budget.
pub fn solve(config: &ExperimentConfig) -> Result<Vec<SolvedTable>> {
    config.validate()?;
    let scenario = config.scenario()?;
    let (mdp, metric) = (&scenario.mdp, &scenario.state_metric);
    let started = Instant::now();
    let q_star = value_iteration(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mut out = vec![SolvedTable {
        method: "optimal".into(),
        epsilon: 0.0,
        policy: greedy_policy(&q_star),
        q: q_star,
        seconds: started.elapsed().as_secs_f64(),
    }];
    for &eps in &config.epsilons {
        let started = Instant::now();
        let q = pessimistic_q_iteration(mdp, eps, metric, config.iterations)?.final_q;
        out.push(SolvedTable {
            method: "pessimistic".into(),
            epsilon: eps,
            policy: maximin_policy(&q, eps, metric, mdp),
            q,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// Model-free pessimistic Q-learning at every configured budget, using the
/// config's learning schedule.
pub fn train(config: &ExperimentConfig) -> Result<Vec<SolvedTable>> {
    config.validate()?;
    let scenario = config.scenario()?;
    let (mdp, metric) = (&scenario.mdp, &scenario.state_metric);
    config
        .epsilons
        .iter()
        .map(|&eps| {
            let started = Instant::now();
            let q = pessimistic_q_learning(mdp, eps, metric, &config.learning)?;
            Ok(SolvedTable {
                method: "q-learning".into(),
                epsilon: eps,
                policy: maximin_policy(&q, eps, metric, mdp),
                q,
                seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// `state,action,value` rows.
pub fn q_table_csv(q: &QTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["state", "action", "value"])?;
    for s in 0..q.num_states() {
        for a in 0..q.num_actions() {
            w.write_record([s.to_string(), a.to_string(), q.get(s, a).to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Writes one `q_<method>_<eps>.csv` per table and `policies.csv`
/// (`method,epsilon,state,action`); with `structured`, also `tables.toml`.
pub fn write_tables(tables: &[SolvedTable], out_dir: &Path, structured: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut policies = csv::Writer::from_path(out_dir.join("policies.csv"))?;
    policies.write_record(["method", "epsilon", "state", "action"])?;
    for t in tables {
        fs::write(out_dir.join(format!("q_{}_{}.csv", t.method, t.epsilon)), q_table_csv(&t.q)?)?;
        for (s, a) in t.policy.as_slice().iter().enumerate() {
            policies.write_record([t.method.clone(), t.epsilon.to_string(), s.to_string(), a.to_string()])?;
        }
    }
    policies.flush()?;
    if structured {
        #[derive(Serialize)]
        struct Entry<'a> {
            method: &'a str,
            epsilon: f64,
            seconds: f64,
            policy: &'a [usize],
            q: Vec<Vec<f64>>,
        }
        #[derive(Serialize)]
        struct Tables<'a> {
            tables: Vec<Entry<'a>>,
        }
        let tables = tables
            .iter()
            .map(|t| Entry {
                method: &t.method,
                epsilon: t.epsilon,
                seconds: t.seconds,
                policy: t.policy.as_slice(),
                q: t.q.rows(),
            })
            .collect();
        let text = toml::to_string(&Tables { tables })
            .map_err(|e| Error::Internal(format!("table serialization: {e}")))?;
        fs::write(out_dir.join("tables.toml"), text)?;
    }
    Ok(())
}

/// One timed operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub epsilon: f64,
    pub seconds: f64,
    pub detail: String,
}

/// Times the solvers and the attacker construction, then runs the
/// evaluation matrix and reports each cell's wall time and invalid
/// observation fraction.
pub fn bench(config: &ExperimentConfig) -> Result<(Vec<BenchRow>, EvalResult)> {
    config.validate()?;
    let scenario = config.scenario()?;
    let (mdp, metric) = (&scenario.mdp, &scenario.state_metric);
    let mut rows = Vec::new();

    let started = Instant::now();
    let q_star = value_iteration(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    rows.push(BenchRow {
        task: "value-iteration".into(),
        epsilon: 0.0,
        seconds: started.elapsed().as_secs_f64(),
        detail: format!("{} states, {} actions", mdp.num_states(), mdp.num_actions()),
    });
    let greedy = greedy_policy(&q_star);
    for &eps in &config.epsilons {
        let started = Instant::now();
        pessimistic_q_iteration(mdp, eps, metric, config.iterations)?;
        rows.push(BenchRow {
            task: "pessimistic-iteration".into(),
            epsilon: eps,
            seconds: started.elapsed().as_secs_f64(),
            detail: format!("{} rounds", config.iterations),
        });
        let started = Instant::now();
        let omega = optimal_attack(mdp, &greedy, eps, metric, DEFAULT_TOL)?;
        rows.push(BenchRow {
            task: "optimal-attack".into(),
            epsilon: eps,
            seconds: started.elapsed().as_secs_f64(),
            detail: format!("{} states perturbed", (0..omega.len()).filter(|&s| omega.observed(s) != s).count()),
        });
    }

    let result = evaluate(config)?;
    for c in &result.cells {
        rows.push(BenchRow {
            task: format!("episodes {} vs {}", c.agent, c.attacker),
            epsilon: c.epsilon,
            seconds: c.seconds,
            detail: format!("{} episodes, invalid fraction {:.3}", c.returns.len(), c.invalid_fraction),
        });
    }
    Ok((rows, result))
}

/// Writes `bench.csv`; with `structured`, also `bench.toml`.
pub fn write_bench(rows: &[BenchRow], out_dir: &Path, structured: bool) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("bench.csv"))?;
    w.write_record(["task", "epsilon", "seconds", "detail"])?;
    for r in rows {
        w.write_record([r.task.clone(), r.epsilon.to_string(), r.seconds.to_string(), r.detail.clone()])?;
    }
    w.flush()?;
    if structured {
        #[derive(Serialize)]
        struct Bench<'a> {
            rows: &'a [BenchRow],
        }
        let text = toml::to_string(&Bench { rows }).map_err(|e| Error::Internal(format!("bench serialization: {e}")))?;
        fs::write(out_dir.join("bench.toml"), text)?;
    }
    Ok(())
}
