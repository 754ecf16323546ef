use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coop_pic::checks::{invariant_suite, oracle_suite, CheckResult};
use coop_pic::output::write_results;
use coop_pic::runner::run_trials;
use coop_pic::scenario::{builtin_names, Scenario};

/// Scenario-driven simulator for cooperative path-integral control of
/// networked stochastic multi-agent systems.
#[derive(Parser)]
#[command(name = "coop-pic", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (bundled name or TOML path) and write result CSVs.
    Run {
        scenario: String,
        /// Override the scenario's trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the scenario's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: scenario setting, then results/<name>;
        /// the COOP_PIC_OUT environment variable overrides both).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a validation suite and write a machine-readable report.
    Validate {
        /// Which suite: "oracle", "invariants", or "all".
        #[arg(long, default_value = "all")]
        suite: String,
        /// Report file (JSON).
        #[arg(long, default_value = "validation_report.json")]
        report: PathBuf,
    },
    /// Run a scenario once per value of a swept parameter.
    ///
    /// Supported keys: `lambda`, `rollouts`, `k`, `w_self.<agent>`,
    /// `w.<i>.<j>` (directed pair weight).
    Sweep {
        scenario: String,
        /// Sweep specification, e.g. `--param w.1.3=0,0.7,1.4`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    List,
}

fn out_dir(cli_out: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    if let Ok(env) = std::env::var("COOP_PIC_OUT") {
        return PathBuf::from(env);
    }
    cli_out
        .or_else(|| scenario.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results").join(&scenario.name))
}

fn run_scenario(
    scenario: &Scenario,
    trials: Option<usize>,
    seed: Option<u64>,
    dir: &PathBuf,
) -> coop_pic::Result<bool> {
    let mut s = scenario.clone();
    if let Some(t) = trials {
        s.trials = t;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
    let problem = s.build_problem()?;
    let results = run_trials(&problem, s.trials, s.seed);
    let failures = results.iter().filter(|r| !r.completed()).count();
    for r in results.iter().filter(|r| !r.completed()) {
        log::error!(
            "trial {} failed: {}",
            r.trial,
            r.failure.as_deref().unwrap_or("unknown")
        );
    }
    let files = write_results(&s, &results, dir)?;
    println!(
        "{}: {} trials ({} failed), {} files under {}",
        s.name,
        s.trials,
        failures,
        files.len(),
        dir.display()
    );
    Ok(failures == 0)
}

fn apply_sweep(scenario: &mut Scenario, key: &str, value: f64) -> coop_pic::Result<()> {
    let bad = |msg: String| coop_pic::Error::Scenario {
        field: key.to_string(),
        message: msg,
    };
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["lambda"] => scenario.lambda = Some(value),
        ["rollouts"] => scenario.rollouts = value as usize,
        ["k"] => scenario.k = value as usize,
        ["w_self", agent] => {
            let a: usize = agent.parse().map_err(|_| bad("bad agent index".into()))?;
            scenario
                .agents
                .get_mut(a.wrapping_sub(1))
                .ok_or_else(|| bad(format!("no agent {a}")))?
                .w_self = value;
        }
        ["w", i, j] => {
            let i: usize = i.parse().map_err(|_| bad("bad agent index".into()))?;
            let j: usize = j.parse().map_err(|_| bad("bad agent index".into()))?;
            match scenario.pairs.iter_mut().find(|p| p.i == i && p.j == j) {
                Some(p) => p.w = value,
                None => scenario
                    .pairs
                    .push(coop_pic::scenario::PairWeight { i, j, w: value }),
            }
        }
        _ => {
            return Err(bad(
                "supported keys: lambda, rollouts, k, w_self.<agent>, w.<i>.<j>".into(),
            ))
        }
    }
    Ok(())
}

fn print_suite(label: &str, results: &[CheckResult]) -> bool {
    let mut ok = true;
    for c in results {
        println!(
            "[{}] {label}/{}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    ok
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> coop_pic::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            trials,
            seed,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let dir = out_dir(out, &s);
            run_scenario(&s, trials, seed, &dir)
        }
        Command::Validate { suite, report } => {
            let mut suites: Vec<(&str, Vec<CheckResult>)> = Vec::new();
            match suite.as_str() {
                "oracle" => suites.push(("oracle", oracle_suite())),
                "invariants" => suites.push(("invariants", invariant_suite())),
                "all" => {
                    suites.push(("invariants", invariant_suite()));
                    suites.push(("oracle", oracle_suite()));
                }
                other => {
                    return Err(coop_pic::Error::Scenario {
                        field: "--suite".into(),
                        message: format!("unknown suite `{other}` (oracle | invariants | all)"),
                    })
                }
            }
            let mut ok = true;
            for (label, results) in &suites {
                ok &= print_suite(label, results);
            }
            let json: serde_json::Value = suites
                .iter()
                .map(|(label, results)| {
                    (label.to_string(), serde_json::to_value(results).unwrap())
                })
                .collect::<serde_json::Map<String, serde_json::Value>>()
                .into();
            std::fs::write(&report, serde_json::to_string_pretty(&json).unwrap())?;
            println!("report written to {}", report.display());
            Ok(ok)
        }
        Command::Sweep {
            scenario,
            param,
            trials,
            seed,
            out,
        } => {
            let base = Scenario::load(&scenario)?;
            let (key, values) = param.split_once('=').ok_or_else(|| {
                coop_pic::Error::Scenario {
                    field: "--param".into(),
                    message: "expected <key>=<v1,v2,...>".into(),
                }
            })?;
            let root = out_dir(out, &base);
            let mut ok = true;
            for raw in values.split(',') {
                let value: f64 = raw.trim().parse().map_err(|_| coop_pic::Error::Scenario {
                    field: "--param".into(),
                    message: format!("`{raw}` is not a number"),
                })?;
                let mut s = base.clone();
                apply_sweep(&mut s, key, value)?;
                s.name = format!("{}_{}_{}", base.name, key.replace('.', "_"), raw.trim());
                s.resolve()?;
                let dir = root.join(&s.name);
                ok &= run_scenario(&s, trials, seed, &dir)?;
            }
            Ok(ok)
        }
        Command::List => {
            for name in builtin_names() {
                println!("{name}");
            }
            Ok(true)
        }
    }
}
