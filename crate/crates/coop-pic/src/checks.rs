//! Self-contained pass/fail check suites behind `validate --suite ...`:
//! structural invariants of the estimator and the oracle comparisons that
//! pin down the scoring math.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::costs::{self, DistanceCost, FnCost, SubsystemCost, TerminalCost};
use crate::dynamics::{joint_control_matrix_actuated, joint_noise_scale, AgentModel, NoiseKind};
use crate::error::Result;
use crate::network::{CommGraph, Subsystem};
use crate::output::write_results;
use crate::pic::{self, PathValueConvention, WeightMode};
use crate::runner::run_trials;
use crate::sampler::{sample_agent_paths, sample_joint_batch};
use crate::scenario::Scenario;
use crate::validation::{
    self, desirability_direct_mc, desirability_discretized, desirability_from_path_values,
    lq1d_closed_form_z, lq1d_optimal_control,
};

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, run: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = match run() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn softmax_normalization() -> Result<(bool, String)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scores: Vec<f64> = (0..400).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (probs, _) = pic::path_distribution(&scores)?;
        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst <= 1e-12, format!("max |sum p - 1| = {worst:.3e}")))
}

fn softmax_shift_invariance() -> Result<(bool, String)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let scores: Vec<f64> = (0..200).map(|_| rng.random_range(-20.0..20.0)).collect();
        let shift = rng.random_range(-1.0e3..1.0e3);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let (p, _) = pic::path_distribution(&scores)?;
        let (q, _) = pic::path_distribution(&shifted)?;
        worst = worst.max(
            p.iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Ok((worst <= 1e-12, format!("max |p - p_shifted| = {worst:.3e}")))
}

fn h_consistency_identity() -> Result<(bool, String)> {
    let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
    let lambda = 2.5;
    let x = DVector::zeros(8);
    let w = pic::step_weight_matrix(&model, &x)?;
    let sigma = joint_noise_scale(&model, 2, NoiseKind::Sampling);
    let r = costs::derive_control_weight(&sigma, lambda)?;
    let b_d = joint_control_matrix_actuated(&model, &x)?;
    let rebuilt = lambda
        * &b_d
        * r.clone().try_inverse().expect("derived R is diagonal positive")
        * b_d.transpose();
    let err = (&w.h - rebuilt).norm() / w.h.norm();
    Ok((err <= 1e-14, format!("|H - lambda B R^-1 B^T| / |H| = {err:.3e}")))
}

fn zero_noise_determinism() -> Result<(bool, String)> {
    let model = AgentModel::unicycle(0.1, 0.05, 0.0, 0.0);
    let x0 = DVector::from_column_slice(&[1.0, 2.0, 0.4, 0.3]);
    let paths = sample_agent_paths(&model, &x0, 4, 0.25, 32, 0.0, 77, 3, 1)?;
    let all_equal = paths.iter().all(|p| p == &paths[0]);
    Ok((
        all_equal,
        "zero sampling noise collapses every rollout onto the drift path".into(),
    ))
}

fn seed_reproducible_csvs() -> Result<(bool, String)> {
    let mut s = Scenario::load("fig3_joint")?;
    s.trials = 1;
    s.t_f = 1.0;
    s.rollouts = 32;
    let p = s.build_problem()?;
    let d1 = tempfile::tempdir()?;
    let d2 = tempfile::tempdir()?;
    write_results(&s, &run_trials(&p, 1, s.seed), d1.path())?;
    write_results(&s, &run_trials(&p, 1, s.seed), d2.path())?;
    let a = std::fs::read(d1.path().join("trajectory_trial_000.csv"))?;
    let b = std::fs::read(d2.path().join("trajectory_trial_000.csv"))?;
    Ok((
        a == b,
        format!("{} bytes, identical across reruns: {}", a.len(), a == b),
    ))
}

fn gradient_agreement() -> Result<(bool, String)> {
    let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
    let cost = DistanceCost::new(
        4,
        [35.0, 20.0],
        0.7,
        0.0,
        vec![(1, 1.4, 0.0)],
        vec![],
        TerminalCost::Zero,
    )?;
    let report = validation::gradient_check(&cost, &model, 2, 100, 1e-5, 23);
    Ok((
        report.failures.is_empty() && report.checked >= 80,
        format!(
            "{} states checked, {} skipped, max relative error {:.3e}",
            report.checked, report.skipped, report.max_rel_error
        ),
    ))
}

fn clamped_cost_nonnegative() -> Result<(bool, String)> {
    let cost = DistanceCost::new(
        4,
        [35.0, 20.0],
        0.7,
        30.0,
        vec![(1, 1.4, 25.0)],
        vec![],
        TerminalCost::Zero,
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(24);
    let mut min_q = f64::INFINITY;
    for _ in 0..1000 {
        let x = DVector::from_fn(8, |_, _| rng.random_range(-50.0..50.0));
        min_q = min_q.min(cost.running(&x, 0.0));
    }
    Ok((min_q >= 0.0, format!("min q over random states = {min_q:.3e}")))
}

fn subsystem_symmetry() -> Result<(bool, String)> {
    let graph = CommGraph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (2, 5)])?;
    for i in 1..=5 {
        for j in 1..=5 {
            if graph.neighbors(i)?.contains(&j) != graph.neighbors(j)?.contains(&i) {
                return Ok((false, format!("asymmetric neighbor relation at ({i}, {j})")));
            }
        }
        let sub = graph.subsystem(i)?;
        if sub.center() != i || sub.members()[0] != i {
            return Ok((false, format!("subsystem {i} does not lead with its center")));
        }
        let mut rest: Vec<usize> = sub.members()[1..].to_vec();
        let sorted = {
            let mut s = rest.clone();
            s.sort_unstable();
            s
        };
        if rest != sorted {
            return Ok((false, format!("subsystem {i} members not in canonical order")));
        }
        rest.push(i);
        rest.sort_unstable();
        let mut expected = graph.neighbors(i)?;
        expected.push(i);
        expected.sort_unstable();
        if rest != expected {
            return Ok((false, format!("subsystem {i} differs from N_i + center")));
        }
    }
    Ok((true, "neighbor symmetry and canonical member order on a 5-agent graph".into()))
}

/// Structural invariants of the sampler, scorer, and I/O pipeline.
pub fn invariant_suite() -> Vec<CheckResult> {
    vec![
        check("softmax_normalization", softmax_normalization),
        check("softmax_shift_invariance", softmax_shift_invariance),
        check("h_consistency_identity", h_consistency_identity),
        check("zero_noise_determinism", zero_noise_determinism),
        check("seed_reproducible_csvs", seed_reproducible_csvs),
        check("gradient_agreement", gradient_agreement),
        check("clamped_cost_nonnegative", clamped_cost_nonnegative),
        check("subsystem_symmetry", subsystem_symmetry),
    ]
}

const LQ_A: f64 = 6.0;
const LQ_SIGMA: f64 = 1.0;
const LQ_LAMBDA: f64 = 1.0;
const LQ_X: f64 = 1.0;
const LQ_EPS: f64 = 0.01;
const LQ_K: usize = 25;
const LQ_SAMPLES: usize = 10_000;

fn lq_cost() -> FnCost<impl Fn(&DVector<f64>, f64) -> f64, impl Fn(&DVector<f64>) -> f64> {
    FnCost {
        running: |_: &DVector<f64>, _| 0.0,
        terminal: |y: &DVector<f64>| LQ_A * y[0] * y[0] / 2.0,
    }
}

fn lq_desirability_agreement() -> Result<(bool, String)> {
    let horizon = LQ_EPS * LQ_K as f64;
    let model = AgentModel::integrator_1d(LQ_SIGMA, LQ_SIGMA);
    let sub = Subsystem::singleton(1);
    let batch = sample_joint_batch(
        &model,
        &sub,
        &[DVector::from_element(1, LQ_X)],
        LQ_K,
        LQ_EPS,
        LQ_SAMPLES,
        0.0,
        31,
        0,
    )?;
    let disc = desirability_discretized(&lq_cost(), &batch, LQ_LAMBDA, 0.0)?;
    let direct = desirability_direct_mc(
        &model,
        &lq_cost(),
        &DVector::from_element(1, LQ_X),
        0.0,
        horizon,
        LQ_LAMBDA,
        LQ_SAMPLES,
        LQ_K * 20,
        32,
    )?;
    let exact = lq1d_closed_form_z(LQ_A, LQ_SIGMA, LQ_LAMBDA, LQ_X, horizon);
    let gap = (disc.value - direct.value).abs();
    let tol = 3.0 * (disc.std_err + direct.std_err);
    Ok((
        gap <= tol,
        format!(
            "discretized {:.5} vs direct {:.5} (closed form {exact:.5}), \
             |gap| = {gap:.2e} <= 3 (se1 + se2) = {tol:.2e}",
            disc.value, direct.value
        ),
    ))
}

fn lq_control_agreement() -> Result<(bool, String)> {
    let horizon = LQ_EPS * LQ_K as f64;
    let model = AgentModel::integrator_1d(LQ_SIGMA, LQ_SIGMA);
    let sub = Subsystem::singleton(1);
    let batch = sample_joint_batch(
        &model,
        &sub,
        &[DVector::from_element(1, LQ_X)],
        LQ_K,
        LQ_EPS,
        LQ_SAMPLES,
        0.0,
        33,
        0,
    )?;
    let (_, est) = pic::plan(
        &lq_cost(),
        &model,
        &batch,
        LQ_LAMBDA,
        PathValueConvention::PlainQuadratic,
        WeightMode::CostImportance,
        0.0,
    )?;
    let exact = lq1d_optimal_control(LQ_A, LQ_SIGMA, LQ_LAMBDA, LQ_X, horizon);
    let rel = (est.joint[0] - exact).abs() / exact.abs();
    Ok((
        rel <= 0.05,
        format!(
            "estimated u = {:.4} vs analytic {exact:.4}, relative error {rel:.3} <= 0.05 \
             (ess {:.0} of {LQ_SAMPLES})",
            est.joint[0], est.ess
        ),
    ))
}

fn convention_arbitration() -> Result<(bool, String)> {
    let lambda = 2.0;
    let horizon = LQ_EPS * LQ_K as f64;
    let model = AgentModel::integrator_1d(LQ_SIGMA, LQ_SIGMA);
    let sub = Subsystem::singleton(1);
    let batch = sample_joint_batch(
        &model,
        &sub,
        &[DVector::from_element(1, LQ_X)],
        LQ_K,
        LQ_EPS,
        LQ_SAMPLES,
        0.0,
        34,
        0,
    )?;
    let exact = lq1d_closed_form_z(LQ_A, LQ_SIGMA, lambda, LQ_X, horizon);
    let plain = desirability_from_path_values(
        &model,
        &lq_cost(),
        &batch,
        lambda,
        PathValueConvention::PlainQuadratic,
        0.0,
    )?;
    let scaled = desirability_from_path_values(
        &model,
        &lq_cost(),
        &batch,
        lambda,
        PathValueConvention::LambdaScaledQuadratic,
        0.0,
    )?;
    let plain_ok = (plain.value - exact).abs() <= 3.0 * plain.std_err + 0.01 * exact;
    let scaled_off = (scaled.value - exact).abs() > 10.0 * plain.std_err;
    Ok((
        plain_ok && scaled_off,
        format!(
            "chosen convention: plain_quadratic; at lambda = {lambda}, Z exact {exact:.5}, \
             plain {:.5}, lambda-scaled {:.5}",
            plain.value, scaled.value
        ),
    ))
}

fn two_agent_unicycle_agreement() -> Result<(bool, String)> {
    let model = AgentModel::unicycle(0.75, 0.65, 0.75, 0.65);
    let graph = CommGraph::new(2, &[(1, 2)])?;
    let sub = graph.subsystem(1)?;
    let kappa = 0.05;
    let goals = [[3.0, 0.0], [3.0, 2.0]];
    let cost = FnCost {
        running: |_: &DVector<f64>, _| 0.0,
        terminal: move |y: &DVector<f64>| {
            kappa
                * goals
                    .iter()
                    .enumerate()
                    .map(|(a, g)| (y[4 * a] - g[0]).powi(2) + (y[4 * a + 1] - g[1]).powi(2))
                    .sum::<f64>()
        },
    };
    let x0 = vec![
        DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]),
        DVector::from_column_slice(&[0.0, 2.0, 1.0, 0.0]),
    ];
    let eps = 0.02;
    let k = 20;
    let batch = sample_joint_batch(&model, &sub, &x0, k, eps, 20_000, 0.0, 35, 0)?;
    let disc = desirability_discretized(&cost, &batch, 1.0, 0.0)?;
    let joint0 = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 1.0, 0.0]);
    let direct = desirability_direct_mc(
        &model,
        &cost,
        &joint0,
        0.0,
        eps * k as f64,
        1.0,
        20_000,
        k * 20,
        36,
    )?;
    let gap = (disc.value - direct.value).abs();
    let tol = 3.0 * (disc.std_err + direct.std_err);
    Ok((
        gap <= tol,
        format!(
            "discretized {:.5} vs direct {:.5}, |gap| = {gap:.2e} <= {tol:.2e}",
            disc.value, direct.value
        ),
    ))
}

/// Oracle comparisons: estimator consistency on the analytic LQ problem
/// and a two-agent unicycle toy, plus the path-value convention
/// arbitration.
pub fn oracle_suite() -> Vec<CheckResult> {
    vec![
        check("lq_desirability_agreement", lq_desirability_agreement),
        check("lq_control_agreement", lq_control_agreement),
        check("convention_arbitration", convention_arbitration),
        check("two_agent_unicycle_agreement", two_agent_unicycle_agreement),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_all_pass() {
        for c in invariant_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn oracles_all_pass() {
        for c in oracle_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
