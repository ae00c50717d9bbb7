//! `sarl`: solve, train, attack and verify robust tabular agents.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sarl::harness::{
    bench, evaluate, solve, train, verify_suite, write_bench, write_reports, write_tables, AgentKind, AttackerKind, CheckKind,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "sarl", version, about = "Robust tabular RL under adversarial state perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value iteration and pessimistic Q-iteration for every budget.
    Solve(Common),
    /// Model-free pessimistic Q-learning for every budget.
    Train(Common),
    /// Run the agent x attacker x epsilon matrix and write per-episode returns.
    AttackEval(Common),
    /// Run the property-check suites; exits nonzero if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suites to run (repeatable); all by default.
        #[arg(long = "check", value_parser = parse_check)]
        checks: Vec<CheckKind>,
    },
    /// Time the solvers, attacker construction and episode simulation.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Structured,
}

fn parse_check(s: &str) -> Result<CheckKind, String> {
    s.parse().map_err(|e: sarl::Error| e.to_string())
}

impl Common {
    fn structured(&self) -> bool {
        self.format == Format::Structured
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::gridworld(
                vec![0.0, 1.0, 2.0],
                AgentKind::ALL.to_vec(),
                vec![AttackerKind::None, AttackerKind::Optimal],
            ),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.learning.seed = seed;
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve(common) => {
            let tables = solve(&common.load()?)?;
            write_tables(&tables, &common.out, common.structured())?;
            for t in &tables {
                println!("{} eps={} solved in {:.3}s", t.method, t.epsilon, t.seconds);
            }
            report_out(&common.out);
        }
        Command::Train(common) => {
            let tables = train(&common.load()?)?;
            write_tables(&tables, &common.out, common.structured())?;
            for t in &tables {
                println!("{} eps={} trained in {:.3}s", t.method, t.epsilon, t.seconds);
            }
            report_out(&common.out);
        }
        Command::AttackEval(common) => {
            let result = evaluate(&common.load()?)?;
            result.write(&common.out, common.structured())?;
            println!("{:<20} {:<18} {:>7} {:>10} {:>9} {:>8}", "agent", "attacker", "epsilon", "mean", "std", "invalid");
            for c in &result.cells {
                match &c.error {
                    Some(e) => println!("{:<20} {:<18} {:>7} failed: {e}", c.agent, c.attacker, c.epsilon),
                    None => println!(
                        "{:<20} {:<18} {:>7} {:>10.2} {:>9.2} {:>8.3}",
                        c.agent, c.attacker, c.epsilon, c.mean, c.std, c.invalid_fraction
                    ),
                }
            }
            report_out(&common.out);
        }
        Command::Verify { common, checks } => {
            let checks = if checks.is_empty() { CheckKind::ALL.to_vec() } else { checks };
            let seed = common.seed.unwrap_or(0);
            let reports = verify_suite(&checks, seed)?;
            for r in &reports {
                println!("{r}");
            }
            write_reports(&reports, &common.out, common.structured())?;
            report_out(&common.out);
            if reports.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench(common) => {
            let (rows, result) = bench(&common.load()?)?;
            write_bench(&rows, &common.out, common.structured())?;
            result.write(&common.out, common.structured())?;
            for r in &rows {
                println!("{:<40} eps={:<5} {:>9.4}s  {}", r.task, r.epsilon, r.seconds, r.detail);
            }
            report_out(&common.out);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn report_out(out: &Path) {
    eprintln!("wrote {}", out.display());
}
