//! Results persistence: per-trial trajectory CSVs, per-cycle diagnostics,
//! an aggregate summary of configured pairwise distances, final goal
//! errors, and the fully-resolved scenario echo.
//!
//! Every float is serialized with 17 significant digits so that files
//! round-trip losslessly and identical runs produce byte-identical output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::runner::TrialResult;
use crate::scenario::Scenario;

/// Lossless float formatting: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn pair_distance(states: &[nalgebra::DVector<f64>], i: usize, j: usize) -> f64 {
    let a = &states[i - 1];
    let b = &states[j - 1];
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn trajectory_csv(scenario: &Scenario, result: &TrialResult) -> String {
    let m = scenario
        .agents
        .first()
        .map(|a| a.init.len())
        .unwrap_or_default();
    let mut out = String::new();
    if m == 4 {
        out.push_str("trial,t,agent,x,y,v,phi,u,omega\n");
    } else {
        out.push_str("trial,t,agent");
        for c in 0..m {
            let _ = write!(out, ",x{}", c + 1);
        }
        let d = result
            .controls
            .first()
            .and_then(|c| c.first())
            .map(|u| u.len())
            .unwrap_or(m);
        for c in 0..d {
            let _ = write!(out, ",u{}", c + 1);
        }
        out.push('\n');
    }
    for (cycle, (t, states)) in result.times.iter().zip(&result.states).enumerate() {
        for (idx, x) in states.iter().enumerate() {
            let _ = write!(out, "{},{},{}", result.trial, fmt_f64(*t), idx + 1);
            for v in x.iter() {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            // The control applied over the cycle starting at t; zero on the
            // final boundary where no further control is applied.
            match result.controls.get(cycle) {
                Some(us) => {
                    for v in us[idx].iter() {
                        let _ = write!(out, ",{}", fmt_f64(*v));
                    }
                }
                None => {
                    let d = result
                        .controls
                        .first()
                        .and_then(|c| c.first())
                        .map(|u| u.len())
                        .unwrap_or(0);
                    for _ in 0..d {
                        let _ = write!(out, ",{}", fmt_f64(0.0));
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

fn diagnostics_csv(results: &[TrialResult]) -> String {
    let mut out = String::from("trial,cycle,t,eps,k_eff,agent,ess,s_min,s_mean,u_norm,plan_secs\n");
    for r in results {
        for d in &r.diags {
            for a in &d.agents {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.trial,
                    d.cycle,
                    fmt_f64(d.t),
                    fmt_f64(d.eps),
                    d.k_eff,
                    a.agent,
                    fmt_f64(a.ess),
                    fmt_f64(a.s_min),
                    fmt_f64(a.s_mean),
                    fmt_f64(a.u_norm),
                    fmt_f64(a.plan_secs),
                );
            }
        }
    }
    out
}

/// Per-time mean and standard deviation of each reported pairwise distance,
/// aggregated across trials. Trials that exited early only contribute to
/// the times they reached.
pub fn summary_csv(scenario: &Scenario, results: &[TrialResult]) -> String {
    let mut out = String::from("t,n_trials");
    for p in &scenario.report_pairs {
        let _ = write!(out, ",dist_{}_{}_mean,dist_{}_{}_std", p[0], p[1], p[0], p[1]);
    }
    out.push('\n');
    let max_len = results.iter().map(|r| r.times.len()).max().unwrap_or(0);
    for cycle in 0..max_len {
        let live: Vec<&TrialResult> = results.iter().filter(|r| r.times.len() > cycle).collect();
        if live.is_empty() {
            continue;
        }
        let _ = write!(out, "{},{}", fmt_f64(live[0].times[cycle]), live.len());
        for p in &scenario.report_pairs {
            let ds: Vec<f64> = live
                .iter()
                .map(|r| pair_distance(&r.states[cycle], p[0], p[1]))
                .collect();
            let n = ds.len() as f64;
            let mean = ds.iter().sum::<f64>() / n;
            let var = ds.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let _ = write!(out, ",{},{}", fmt_f64(mean), fmt_f64(var.sqrt()));
        }
        out.push('\n');
    }
    out
}

fn final_errors_csv(scenario: &Scenario, results: &[TrialResult]) -> String {
    let mut out = String::from("agent,init_distance,final_error_mean,final_error_std\n");
    for (idx, spec) in scenario.agents.iter().enumerate() {
        let Some(goal) = spec.goal else { continue };
        let init_d =
            ((spec.init[0] - goal[0]).powi(2) + (spec.init[1] - goal[1]).powi(2)).sqrt();
        let errs: Vec<f64> = results
            .iter()
            .filter_map(|r| r.final_states())
            .map(|s| ((s[idx][0] - goal[0]).powi(2) + (s[idx][1] - goal[1]).powi(2)).sqrt())
            .collect();
        if errs.is_empty() {
            continue;
        }
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let _ = writeln!(
            out,
            "{},{},{},{}",
            idx + 1,
            fmt_f64(init_d),
            fmt_f64(mean),
            fmt_f64(var.sqrt())
        );
    }
    out
}

/// Writes all result artifacts under `dir` (created if absent) and returns
/// the paths written.
pub fn write_results(
    scenario: &Scenario,
    results: &[TrialResult],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in results {
        let path = dir.join(format!("trajectory_trial_{:03}.csv", r.trial));
        std::fs::write(&path, trajectory_csv(scenario, r))?;
        written.push(path);
    }
    let diag = dir.join("diagnostics.csv");
    std::fs::write(&diag, diagnostics_csv(results))?;
    written.push(diag);
    let summary = dir.join("summary.csv");
    std::fs::write(&summary, summary_csv(scenario, results))?;
    written.push(summary);
    let finals = dir.join("final_errors.csv");
    std::fs::write(&finals, final_errors_csv(scenario, results))?;
    written.push(finals);
    let echo = dir.join("scenario.toml");
    std::fs::write(&echo, scenario.to_toml()?)?;
    written.push(echo);
    Ok(written)
}
