//! Rollout scoring, the optimal path distribution, and the control
//! estimator.
//!
//! Each rollout receives a generalized path value (terminal cost, running
//! cost, a quadratic deviation term, and log-determinant corrections) and
//! an initial control vector. A softmax over negative scores gives the path
//! weights; the weighted initial controls yield the joint optimal control
//! estimate, from which the center agent's local action is extracted.
//!
//! Two weighting modes are supported. `PathValue` exponentiates the full
//! generalized path value, the direct discretization of the path integral.
//! `CostImportance` accounts for the rollouts being drawn from the passive
//! transition density itself: the quadratic and log-determinant terms of
//! the path value cancel against the sampling density, leaving the running
//! and terminal costs as the importance weight. The second mode keeps the
//! effective sample size bounded away from one as the horizon grows and is
//! the default for closed-loop execution.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::costs::SubsystemCost;
use crate::dynamics::{
    joint_control_matrix_actuated, joint_drift_actuated, joint_noise_scale, AgentModel, NoiseKind,
};
use crate::error::{Error, Result};
use crate::sampler::{Rollout, RolloutBatch};

/// Placement of the temperature on the quadratic deviation term of the
/// path value. The two published forms coincide at lambda = 1; the
/// desirability oracle arbitrates in favor of `PlainQuadratic`, which
/// matches the Gaussian transition density of the discretized passive
/// dynamics (see `validation::convention_arbitration`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathValueConvention {
    /// Quadratic term scaled by `eps / (2 lambda)`.
    LambdaScaledQuadratic,
    /// Quadratic term scaled by `eps / 2`.
    PlainQuadratic,
}

impl Default for PathValueConvention {
    fn default() -> Self {
        PathValueConvention::PlainQuadratic
    }
}

/// Which score drives the softmax weights of the control estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Full generalized path value.
    PathValue,
    /// Running plus terminal cost only (importance-corrected for passive
    /// sampling).
    CostImportance,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::CostImportance
    }
}

/// Step weight matrix `H = B_d sigma_s sigma_s^T B_d^T` with its inverse
/// and log-determinant.
#[derive(Debug, Clone)]
pub struct StepWeight {
    pub h: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    pub log_det: f64,
}

/// Computes H at a joint state from the sampling noise scale. Fails when H
/// is not positive definite.
pub fn step_weight_matrix(model: &AgentModel, x: &DVector<f64>) -> Result<StepWeight> {
    let n = x.len() / model.state_dim();
    let b_d = joint_control_matrix_actuated(model, x)?;
    let sigma = joint_noise_scale(model, n, NoiseKind::Sampling);
    let gram = &sigma * sigma.transpose();
    let h = &b_d * gram * b_d.transpose();
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("step weight matrix H".into()))?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let h_inv = chol.inverse();
    Ok(StepWeight { h, h_inv, log_det })
}

/// Score of one rollout.
#[derive(Debug, Clone)]
pub struct PathScore {
    /// Generalized path value.
    pub s_tilde: f64,
    /// Running plus terminal cost part alone: `phi/lambda + (eps/lambda) sum q`.
    pub cost_value: f64,
    /// Initial control vector, length `D * n`.
    pub u_tilde: DVector<f64>,
}

/// Actuated deviation of segment `k`:
/// `alpha = (x_d(k+1) - x_d(k)) / eps - f_d(x(k), t_k)`.
fn alpha(
    model: &AgentModel,
    r: &Rollout,
    k: usize,
    t0: f64,
) -> Result<DVector<f64>> {
    let (m, u, d) = (model.state_dim(), model.nonact_dim(), model.act_dim());
    let n = r.x0.len() / m;
    let cur = r.state(k);
    let next = r.state(k + 1);
    let t_k = t0 + k as f64 * r.eps;
    let f_d = joint_drift_actuated(model, cur, t_k)?;
    let mut a = DVector::zeros(d * n);
    for agent in 0..n {
        for j in 0..d {
            let idx = agent * m + u + j;
            a[agent * d + j] = (next[idx] - cur[idx]) / r.eps - f_d[agent * d + j];
        }
    }
    Ok(a)
}

/// Generalized path value and cost part of one rollout.
pub fn path_value(
    cost: &dyn SubsystemCost,
    model: &AgentModel,
    r: &Rollout,
    lambda: f64,
    convention: PathValueConvention,
    t0: f64,
    shared_h: Option<&StepWeight>,
) -> Result<(f64, f64)> {
    let k_total = r.k();
    let eps = r.eps;
    let mut running_sum = 0.0;
    let mut quad_sum = 0.0;
    let mut log_det_sum = 0.0;
    let mut local_h;
    for k in 0..k_total {
        let t_k = t0 + k as f64 * eps;
        running_sum += cost.running(r.state(k), t_k);
        let h = match shared_h {
            Some(h) => h,
            None => {
                local_h = step_weight_matrix(model, r.state(k))?;
                &local_h
            }
        };
        let a = alpha(model, r, k, t0)?;
        quad_sum += (a.transpose() * &h.h_inv * &a)[0];
        log_det_sum += h.log_det;
    }
    let cost_value = cost.terminal(r.state(k_total)) / lambda + eps / lambda * running_sum;
    let quad_scale = match convention {
        PathValueConvention::LambdaScaledQuadratic => eps / (2.0 * lambda),
        PathValueConvention::PlainQuadratic => eps / 2.0,
    };
    let s_tilde = cost_value + quad_scale * quad_sum + 0.5 * log_det_sum;
    if !s_tilde.is_finite() {
        return Err(Error::Scoring("non-finite path value".into()));
    }
    Ok((s_tilde, cost_value))
}

/// Initial control vector of one rollout:
/// `u~ = -(eps/lambda) grad_d q(x0, t0) + H(0)^{-1} alpha(0)`.
pub fn initial_control(
    cost: &dyn SubsystemCost,
    model: &AgentModel,
    r: &Rollout,
    lambda: f64,
    t0: f64,
) -> Result<DVector<f64>> {
    let h0 = step_weight_matrix(model, &r.x0)?;
    let grad = cost.running_grad_actuated(&r.x0, t0, model);
    initial_control_with(&h0, &grad, model, r, lambda, t0)
}

fn initial_control_with(
    h0: &StepWeight,
    grad_q0: &DVector<f64>,
    model: &AgentModel,
    r: &Rollout,
    lambda: f64,
    t0: f64,
) -> Result<DVector<f64>> {
    let a0 = alpha(model, r, 0, t0)?;
    let u = -(r.eps / lambda) * grad_q0 + &h0.h_inv * a0;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Scoring("non-finite initial control".into()));
    }
    Ok(u)
}

/// Scores every rollout of a batch. The gradient of q and the step weight
/// at the shared initial state are computed once; when the control matrix
/// is state-independent the per-segment H is shared as well.
pub fn score_batch(
    cost: &dyn SubsystemCost,
    model: &AgentModel,
    batch: &RolloutBatch,
    lambda: f64,
    convention: PathValueConvention,
    t0: f64,
) -> Result<Vec<PathScore>> {
    if batch.rollouts.is_empty() {
        return Err(Error::Scoring("empty rollout batch".into()));
    }
    let x0 = &batch.rollouts[0].x0;
    let h0 = step_weight_matrix(model, x0)?;
    let grad_q0 = cost.running_grad_actuated(x0, t0, model);
    let shared_h = model.constant_control_matrix().then(|| h0.clone());
    batch
        .rollouts
        .par_iter()
        .map(|r| {
            let (s_tilde, cost_value) =
                path_value(cost, model, r, lambda, convention, t0, shared_h.as_ref())?;
            let u_tilde = initial_control_with(&h0, &grad_q0, model, r, lambda, t0)?;
            Ok(PathScore {
                s_tilde,
                cost_value,
                u_tilde,
            })
        })
        .collect()
}

/// Softmax of negative scores, stabilized by subtracting the minimum.
/// Returns the probabilities and the effective sample size `1 / sum p^2`.
pub fn path_distribution(scores: &[f64]) -> Result<(Vec<f64>, f64)> {
    if scores.is_empty() {
        return Err(Error::Scoring("no path scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Scoring("NaN path score".into()));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = scores.iter().map(|s| (-(s - min)).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let ess = 1.0 / probs.iter().map(|p| p * p).sum::<f64>();
    Ok((probs, ess))
}

/// Joint control estimate with the center agent's extracted local action.
#[derive(Debug, Clone)]
pub struct ControlEstimate {
    /// Joint control, length `P * n`.
    pub joint: DVector<f64>,
    /// Center-agent block, length `P`.
    pub local: DVector<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

/// Weighted control estimate
/// `u* = sigma_s sigma_s^T B_d^T sum_y p_y u~_y`; the local action is the
/// first `P` entries under the canonical member order.
pub fn estimate_control(
    model: &AgentModel,
    x0: &DVector<f64>,
    scores: &[PathScore],
    probs: &[f64],
    ess: f64,
) -> Result<ControlEstimate> {
    if scores.len() != probs.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} weights",
            scores.len(),
            probs.len()
        )));
    }
    let n = x0.len() / model.state_dim();
    let d_n = model.act_dim() * n;
    // Deterministic ordered fold so results do not depend on thread
    // schedule.
    let mut weighted = DVector::zeros(d_n);
    for (score, &p) in scores.iter().zip(probs) {
        weighted.axpy(p, &score.u_tilde, 1.0);
    }
    let b_d = joint_control_matrix_actuated(model, x0)?;
    let sigma = joint_noise_scale(model, n, NoiseKind::Sampling);
    let joint = &sigma * sigma.transpose() * b_d.transpose() * weighted;
    let local = joint.rows(0, model.input_dim()).clone_owned();
    Ok(ControlEstimate {
        joint,
        local,
        weights: probs.to_vec(),
        ess,
    })
}

/// Scores a batch and estimates the control in one call.
pub fn plan(
    cost: &dyn SubsystemCost,
    model: &AgentModel,
    batch: &RolloutBatch,
    lambda: f64,
    convention: PathValueConvention,
    weight_mode: WeightMode,
    t0: f64,
) -> Result<(Vec<PathScore>, ControlEstimate)> {
    let scores = score_batch(cost, model, batch, lambda, convention, t0)?;
    let selector: Vec<f64> = match weight_mode {
        WeightMode::PathValue => scores.iter().map(|s| s.s_tilde).collect(),
        WeightMode::CostImportance => scores.iter().map(|s| s.cost_value).collect(),
    };
    let (probs, ess) = path_distribution(&selector)?;
    let estimate = estimate_control(model, &batch.rollouts[0].x0, &scores, &probs, ess)?;
    Ok((scores, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::FnCost;
    use crate::network::{CommGraph, Subsystem};
    use approx::assert_relative_eq;

    fn zero_cost() -> FnCost<impl Fn(&DVector<f64>, f64) -> f64, impl Fn(&DVector<f64>) -> f64> {
        FnCost {
            running: |_x: &DVector<f64>, _t: f64| 0.0,
            terminal: |_x: &DVector<f64>| 0.0,
        }
    }

    #[test]
    fn step_weight_identity() {
        let model = AgentModel::integrator_1d(0.5, 1.0);
        let x = DVector::zeros(1);
        let w = step_weight_matrix(&model, &x).unwrap();
        assert_relative_eq!(w.h[(0, 0)], 1.0);
        assert_relative_eq!(w.log_det, 0.0);
    }

    #[test]
    fn step_weight_two_unicycles() {
        let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
        let x = DVector::zeros(8);
        let w = step_weight_matrix(&model, &x).unwrap();
        let expect = [0.5625, 0.4225, 0.5625, 0.4225];
        for i in 0..4 {
            assert_relative_eq!(w.h[(i, i)], expect[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn step_weight_equals_lambda_b_rinv_bt() {
        // H = lambda B_d R^{-1} B_d^T when R is derived from the sampling
        // noise; holds to machine precision.
        let lambda = 2.5;
        let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
        let x = DVector::zeros(4);
        let w = step_weight_matrix(&model, &x).unwrap();
        let sigma = joint_noise_scale(&model, 1, NoiseKind::Sampling);
        let r = crate::costs::derive_control_weight(&sigma, lambda).unwrap();
        let b_d = joint_control_matrix_actuated(&model, &x).unwrap();
        let alt = lambda * &b_d * r.try_inverse().unwrap() * b_d.transpose();
        assert!((w.h - alt).amax() < 1e-14);
    }

    fn one_step_rollout(x0: f64, x1: f64, eps: f64) -> Rollout {
        Rollout {
            x0: DVector::from_element(1, x0),
            steps: vec![DVector::from_element(1, x1)],
            eps,
        }
    }

    #[test]
    fn noiseless_rollout_zero_cost_scores_zero() {
        let model = AgentModel::integrator_1d(1.0, 1.0);
        let r = one_step_rollout(0.3, 0.3, 0.1);
        let (s, c) = path_value(
            &zero_cost(),
            &model,
            &r,
            1.0,
            PathValueConvention::PlainQuadratic,
            0.0,
            None,
        )
        .unwrap();
        assert_relative_eq!(s, 0.0);
        assert_relative_eq!(c, 0.0);
    }

    #[test]
    fn path_value_single_segment_arithmetic() {
        // K=1, one dim, lambda=1, eps=0.1, alpha=3, H=4:
        // S = 0.1/2 * 9/4 + 0.5 ln 4.
        let model = AgentModel::integrator_1d(2.0, 2.0);
        let r = one_step_rollout(0.0, 0.3, 0.1);
        let (s, _) = path_value(
            &zero_cost(),
            &model,
            &r,
            1.0,
            PathValueConvention::LambdaScaledQuadratic,
            0.0,
            None,
        )
        .unwrap();
        assert_relative_eq!(s, 0.05 * 9.0 / 4.0 + 0.5 * 4.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn constant_terminal_shifts_path_value_by_c_over_lambda() {
        let model = AgentModel::integrator_1d(1.0, 1.0);
        let r = one_step_rollout(0.0, 0.2, 0.1);
        let lambda = 2.0;
        let shifted = FnCost {
            running: |_: &DVector<f64>, _| 0.0,
            terminal: |_: &DVector<f64>| 5.0,
        };
        let (s0, _) = path_value(
            &zero_cost(),
            &model,
            &r,
            lambda,
            PathValueConvention::PlainQuadratic,
            0.0,
            None,
        )
        .unwrap();
        let (s1, _) = path_value(
            &shifted,
            &model,
            &r,
            lambda,
            PathValueConvention::PlainQuadratic,
            0.0,
            None,
        )
        .unwrap();
        assert_relative_eq!(s1 - s0, 5.0 / lambda, max_relative = 1e-12);
    }

    #[test]
    fn initial_control_constant_cost() {
        let model = AgentModel::integrator_1d(2.0, 2.0);
        let flat = FnCost {
            running: |_: &DVector<f64>, _| 7.0,
            terminal: |_: &DVector<f64>| 0.0,
        };
        // alpha = 0 -> u~ = 0.
        let r = one_step_rollout(1.0, 1.0, 0.1);
        let u = initial_control(&flat, &model, &r, 1.0, 0.0).unwrap();
        assert_relative_eq!(u[0], 0.0);
        // alpha = 3, H = 4 -> u~ = 3/4.
        let r = one_step_rollout(0.0, 0.3, 0.1);
        let u = initial_control(&flat, &model, &r, 1.0, 0.0).unwrap();
        assert_relative_eq!(u[0], 0.75, max_relative = 1e-9);
    }

    #[test]
    fn initial_control_linear_cost_gradient() {
        // q = w x on the actuated coordinate; the finite-difference gradient
        // must match the slope within 1e-6 relative.
        let w = 2.7;
        let model = AgentModel::integrator_1d(1.0, 1.0);
        let linear = FnCost {
            running: move |x: &DVector<f64>, _| w * x[0],
            terminal: |_: &DVector<f64>| 0.0,
        };
        let eps = 0.1;
        let lambda = 1.5;
        let r = one_step_rollout(1.0, 1.0, eps);
        let u = initial_control(&linear, &model, &r, lambda, 0.0).unwrap();
        assert_relative_eq!(u[0], -(eps / lambda) * w, max_relative = 1e-6);
    }

    #[test]
    fn path_distribution_basics() {
        let (p, ess) = path_distribution(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        for v in &p {
            assert_relative_eq!(*v, 0.25, max_relative = 1e-14);
        }
        assert_relative_eq!(ess, 4.0, max_relative = 1e-12);

        let (p, _) = path_distribution(&[0.0, 2.0f64.ln()]).unwrap();
        assert_relative_eq!(p[0], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(p[1], 1.0 / 3.0, max_relative = 1e-14);

        let (p, ess) = path_distribution(&[17.0]).unwrap();
        assert_eq!(p, vec![1.0]);
        assert_relative_eq!(ess, 1.0);
    }

    #[test]
    fn path_distribution_normalizes_and_shift_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..500).map(|_| rng.random_range(-100.0..900.0)).collect();
        let (p, _) = path_distribution(&scores).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let (q, _) = path_distribution(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(path_distribution(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn estimate_control_degenerate_and_zero() {
        let model = AgentModel::integrator_1d(1.0, 2.0);
        let x0 = DVector::zeros(1);
        let score = PathScore {
            s_tilde: 0.0,
            cost_value: 0.0,
            u_tilde: DVector::from_element(1, 0.5),
        };
        // Y = 1: u* = sigma sigma^T B^T u~ = 4 * 0.5.
        let est = estimate_control(&model, &x0, &[score.clone()], &[1.0], 1.0).unwrap();
        assert_relative_eq!(est.joint[0], 2.0);
        assert_relative_eq!(est.local[0], 2.0);

        let zero = PathScore {
            u_tilde: DVector::zeros(1),
            ..score
        };
        let est = estimate_control(&model, &x0, &[zero.clone(), zero], &[0.5, 0.5], 2.0).unwrap();
        assert_relative_eq!(est.joint[0], 0.0);
    }

    #[test]
    fn local_action_is_center_block() {
        let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
        let g = CommGraph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let sub = g.subsystem(2).unwrap();
        assert_eq!(sub.members()[0], 2);
        let x0 = DVector::zeros(12);
        let score = PathScore {
            s_tilde: 0.0,
            cost_value: 0.0,
            u_tilde: DVector::from_fn(6, |i, _| i as f64 + 1.0),
        };
        let est = estimate_control(&model, &x0, &[score], &[1.0], 1.0).unwrap();
        assert_eq!(est.joint.len(), 6);
        assert_eq!(est.local.len(), 2);
        assert_relative_eq!(est.local[0], est.joint[0]);
        assert_relative_eq!(est.local[1], est.joint[1]);
        let _ = sub;
    }

    #[test]
    fn estimator_is_linear_in_u_tilde() {
        let model = AgentModel::integrator_1d(1.0, 1.0);
        let x0 = DVector::zeros(1);
        let mk = |v: f64| PathScore {
            s_tilde: 0.0,
            cost_value: 0.0,
            u_tilde: DVector::from_element(1, v),
        };
        let probs = [0.25, 0.75];
        let a = estimate_control(&model, &x0, &[mk(1.0), mk(3.0)], &probs, 1.0).unwrap();
        let b = estimate_control(&model, &x0, &[mk(2.0), mk(6.0)], &probs, 1.0).unwrap();
        assert_relative_eq!(b.joint[0], 2.0 * a.joint[0], max_relative = 1e-14);
    }

    #[test]
    fn plan_on_sampled_batch_is_reproducible() {
        let model = AgentModel::unicycle(0.1, 0.05, 0.75, 0.65);
        let sub = Subsystem::singleton(1);
        let x0 = vec![DVector::from_column_slice(&[0.0, 0.0, 0.3, 0.0])];
        let cost = zero_cost();
        let run = || {
            let batch = crate::sampler::sample_joint_batch(
                &model, &sub, &x0, 4, 0.25, 32, 0.0, 9, 0,
            )
            .unwrap();
            let (_, est) = plan(
                &cost,
                &model,
                &batch,
                1.0,
                PathValueConvention::PlainQuadratic,
                WeightMode::CostImportance,
                0.0,
            )
            .unwrap();
            est
        };
        let a = run();
        let b = run();
        assert_eq!(a.joint, b.joint);
        assert!(a.ess >= 1.0 && a.ess <= 32.0);
        assert!(a.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}
