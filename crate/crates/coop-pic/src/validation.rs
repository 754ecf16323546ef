//! Independent oracles arbitrating the scoring math: a direct Monte-Carlo
//! estimate of the desirability function, its discretized counterpart over
//! sampled rollout batches, and the analytic 1-D linear-quadratic control.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::costs::{finite_diff_grad_actuated, SubsystemCost};
use crate::dynamics::{euler_maruyama_step, AgentModel, NoiseKind};
use crate::error::{Error, Result};
use crate::pic::{self, PathValueConvention};
use crate::sampler::RolloutBatch;
use crate::seed;

/// Monte-Carlo estimate of the desirability function Z.
#[derive(Debug, Clone, Copy)]
pub struct DesirabilityEstimate {
    pub value: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn mean_and_se(values: &[f64]) -> DesirabilityEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    DesirabilityEstimate {
        value: mean,
        std_err: (var / n).sqrt(),
        samples: values.len(),
    }
}

/// Direct estimate of
/// `Z(x0, t) = E[exp(-phi(y_tf)/lambda - int q(y, tau)/lambda dtau)]`
/// by simulating the uncontrolled diffusion with fine substeps. The running
/// cost integral uses the left endpoint of each substep.
#[allow(clippy::too_many_arguments)]
pub fn desirability_direct_mc(
    model: &AgentModel,
    cost: &dyn SubsystemCost,
    x0: &DVector<f64>,
    t: f64,
    t_f: f64,
    lambda: f64,
    samples: usize,
    substeps: usize,
    seed_value: u64,
) -> Result<DesirabilityEstimate> {
    if samples == 0 || substeps == 0 {
        return Err(Error::Dimension("samples and substeps must be positive".into()));
    }
    if t_f <= t {
        return Err(Error::Dimension("t_f must exceed t".into()));
    }
    let eps_sub = (t_f - t) / substeps as f64;
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::oracle_stream(seed_value, i);
            let mut state = x0.clone();
            let mut integral = 0.0;
            for k in 0..substeps {
                let tau = t + k as f64 * eps_sub;
                integral += cost.running(&state, tau) * eps_sub;
                state = euler_maruyama_step(
                    model,
                    &state,
                    None,
                    NoiseKind::Sampling,
                    eps_sub,
                    tau,
                    &mut rng,
                )?;
            }
            Ok((-(cost.terminal(&state) + integral) / lambda).exp())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_se(&values))
}

/// Discretized desirability over a batch of passive rollouts. Because the
/// rollouts are drawn from the passive transition density itself, the
/// importance-corrected estimator is the sample mean of
/// `exp(-phi/lambda - (eps/lambda) sum q)`.
pub fn desirability_discretized(
    cost: &dyn SubsystemCost,
    batch: &RolloutBatch,
    lambda: f64,
    t0: f64,
) -> Result<DesirabilityEstimate> {
    let values: Vec<f64> = batch
        .rollouts
        .iter()
        .map(|r| {
            let mut running = 0.0;
            for k in 0..r.k() {
                running += cost.running(r.state(k), t0 + k as f64 * r.eps);
            }
            let cost_value = cost.terminal(r.state(r.k())) / lambda + r.eps / lambda * running;
            Ok((-cost_value).exp())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_and_se(&values))
}

/// Desirability recovered from full generalized path values with the
/// sampling-density correction applied. With the plain-quadratic
/// convention the quadratic and log-determinant terms cancel exactly
/// against the passive density and this coincides with
/// [`desirability_discretized`]; the lambda-scaled convention leaves a
/// residual and disagrees with the direct oracle whenever lambda != 1.
/// This is the estimator used to arbitrate the convention.
pub fn desirability_from_path_values(
    model: &AgentModel,
    cost: &dyn SubsystemCost,
    batch: &RolloutBatch,
    lambda: f64,
    convention: PathValueConvention,
    t0: f64,
) -> Result<DesirabilityEstimate> {
    let scores = pic::score_batch(cost, model, batch, lambda, convention, t0)?;
    // Density part of the plain-quadratic path value, reconstructed from
    // the score decomposition; dividing by the passive density removes it.
    let plain = pic::score_batch(
        cost,
        model,
        batch,
        lambda,
        PathValueConvention::PlainQuadratic,
        t0,
    )?;
    let values: Vec<f64> = scores
        .iter()
        .zip(&plain)
        .map(|(s, p)| {
            let density_terms = p.s_tilde - p.cost_value;
            (-(s.s_tilde - density_terms)).exp()
        })
        .collect();
    Ok(mean_and_se(&values))
}

/// Closed-form desirability of the scalar linear-quadratic problem
/// `dx = u dt + sigma dw`, `q = 0`, `phi = a x^2 / 2` over horizon `t_f - t`:
/// a Gaussian integral of the terminal boundary condition.
pub fn lq1d_closed_form_z(a: f64, sigma: f64, lambda: f64, x: f64, horizon: f64) -> f64 {
    let v = sigma * sigma * horizon;
    (1.0 + a * v / lambda).powf(-0.5) * (-(a * x * x) / (2.0 * (lambda + a * v))).exp()
}

/// Analytic optimal control of the scalar LQ problem, obtained from the
/// closed-form Z by differentiation: `u* = sigma^2 d/dx log Z`.
pub fn lq1d_optimal_control(a: f64, sigma: f64, lambda: f64, x: f64, horizon: f64) -> f64 {
    -(a * sigma * sigma * x) / (lambda + a * sigma * sigma * horizon)
}

/// Report of one finite-difference-versus-analytic gradient comparison.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

/// Compares the registered analytic gradient of a cost against central
/// finite differences at random joint states. States where members
/// coincide in position (non-differentiable pair distance) are excluded
/// and counted as skipped.
pub fn gradient_check(
    cost: &dyn SubsystemCost,
    model: &AgentModel,
    n_members: usize,
    states: usize,
    tol_rel: f64,
    seed_value: u64,
) -> GradientCheck {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_value);
    let m = model.state_dim();
    let mut report = GradientCheck {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    'outer: for idx in 0..states {
        let x = DVector::<f64>::from_fn(m * n_members, |_, _| rng.random_range(-20.0..20.0));
        if m >= 2 {
            for a in 0..n_members {
                for b in (a + 1)..n_members {
                    let dx = x[a * m] - x[b * m];
                    let dy = x[a * m + 1] - x[b * m + 1];
                    if (dx * dx + dy * dy).sqrt() < 1e-3 {
                        report.skipped += 1;
                        continue 'outer;
                    }
                }
            }
        }
        let analytic = cost.running_grad_actuated(&x, 0.0, model);
        let numeric = finite_diff_grad_actuated(|y, t| cost.running(y, t), &x, 0.0, model);
        let scale = numeric.norm().max(analytic.norm()).max(1e-9);
        let rel = (analytic - numeric).norm() / scale;
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > tol_rel {
            report
                .failures
                .push(format!("state {idx}: relative error {rel:.3e}"));
        }
    }
    report
}
