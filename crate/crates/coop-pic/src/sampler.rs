//! Batches of uncontrolled joint rollouts for a subsystem.
//!
//! Each agent samples its own local paths from the passive dynamics under
//! the exploration noise; joint rollouts are assembled by stacking the y-th
//! path of every member. Because the passive dynamics are mutually
//! independent across agents, stacking independently sampled paths yields
//! correctly distributed joint uncontrolled paths. Substreams are keyed by
//! (trial, cycle, sampling agent, rollout), so assembly and direct joint
//! sampling produce bit-identical batches.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::dynamics::{euler_maruyama_step, AgentModel, NoiseKind};
use crate::error::{Error, Result};
use crate::network::Subsystem;
use crate::seed;

/// One uncontrolled joint trajectory: the shared initial state plus K
/// sampled segments of even length `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub x0: DVector<f64>,
    pub steps: Vec<DVector<f64>>,
    pub eps: f64,
}

impl Rollout {
    pub fn k(&self) -> usize {
        self.steps.len()
    }

    /// State at segment index `k` where index 0 is the initial state.
    pub fn state(&self, k: usize) -> &DVector<f64> {
        if k == 0 {
            &self.x0
        } else {
            &self.steps[k - 1]
        }
    }
}

/// A batch of dimensionally identical rollouts sharing one initial state.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub subsystem: Subsystem,
    pub rollouts: Vec<Rollout>,
    pub eps: f64,
    pub k: usize,
    pub trial_seed: u64,
    pub cycle: usize,
}

/// One agent's local uncontrolled paths: `count` paths of `k` steps each,
/// sampled with zero control and the exploration noise.
pub fn sample_agent_paths(
    model: &AgentModel,
    x0: &DVector<f64>,
    k: usize,
    eps: f64,
    count: usize,
    t0: f64,
    trial_seed: u64,
    cycle: usize,
    agent: usize,
) -> Result<Vec<Vec<DVector<f64>>>> {
    if count == 0 || k == 0 {
        return Err(Error::Dimension("rollout count and K must be positive".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|y| {
            let mut rng = seed::rollout_stream(trial_seed, cycle, agent, y);
            let mut path = Vec::with_capacity(k);
            let mut state = x0.clone();
            for step in 0..k {
                let t = t0 + step as f64 * eps;
                state = euler_maruyama_step(
                    model,
                    &state,
                    None,
                    NoiseKind::Sampling,
                    eps,
                    t,
                    &mut rng,
                )?;
                path.push(state.clone());
            }
            Ok(path)
        })
        .collect()
}

/// Stacks per-member path sets into a joint batch. `member_paths` must be
/// ordered by the subsystem's canonical member order and dimensionally
/// identical.
pub fn assemble_joint_batch(
    model: &AgentModel,
    subsystem: &Subsystem,
    member_x0: &[DVector<f64>],
    member_paths: &[Vec<Vec<DVector<f64>>>],
    eps: f64,
    trial_seed: u64,
    cycle: usize,
) -> Result<RolloutBatch> {
    let n = subsystem.len();
    let m = model.state_dim();
    if member_paths.len() != n || member_x0.len() != n {
        return Err(Error::Dimension(format!(
            "expected paths for {n} members, got {}",
            member_paths.len()
        )));
    }
    let count = member_paths[0].len();
    let k = member_paths[0][0].len();
    for paths in member_paths {
        if paths.len() != count || paths.iter().any(|p| p.len() != k) {
            return Err(Error::Dimension(
                "member path sets differ in rollout count or segment count".into(),
            ));
        }
    }
    let mut x0 = DVector::zeros(m * n);
    for (pos, x) in member_x0.iter().enumerate() {
        x0.rows_mut(pos * m, m).copy_from(x);
    }
    let rollouts = (0..count)
        .map(|y| {
            let steps = (0..k)
                .map(|step| {
                    let mut joint = DVector::zeros(m * n);
                    for pos in 0..n {
                        joint
                            .rows_mut(pos * m, m)
                            .copy_from(&member_paths[pos][y][step]);
                    }
                    joint
                })
                .collect();
            Rollout {
                x0: x0.clone(),
                steps,
                eps,
            }
        })
        .collect();
    Ok(RolloutBatch {
        subsystem: subsystem.clone(),
        rollouts,
        eps,
        k,
        trial_seed,
        cycle,
    })
}

/// Samples the joint batch for one subsystem directly, drawing each member's
/// noise from the same per-agent substream used by distributed sampling.
/// Bit-identical to sampling per agent and assembling.
pub fn sample_joint_batch(
    model: &AgentModel,
    subsystem: &Subsystem,
    member_x0: &[DVector<f64>],
    k: usize,
    eps: f64,
    count: usize,
    t0: f64,
    trial_seed: u64,
    cycle: usize,
) -> Result<RolloutBatch> {
    let member_paths = subsystem
        .members()
        .iter()
        .zip(member_x0)
        .map(|(&agent, x0)| {
            sample_agent_paths(model, x0, k, eps, count, t0, trial_seed, cycle, agent)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_joint_batch(model, subsystem, member_x0, &member_paths, eps, trial_seed, cycle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::CommGraph;
    use approx::assert_relative_eq;

    fn unicycle() -> AgentModel {
        AgentModel::unicycle(0.1, 0.05, 0.75, 0.65)
    }

    #[test]
    fn zero_sampling_noise_paths_are_identical() {
        let model = AgentModel::unicycle(0.1, 0.05, 0.0, 0.0);
        let x0 = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let paths = sample_agent_paths(&model, &x0, 3, 0.5, 5, 0.0, 1, 0, 1).unwrap();
        for p in &paths[1..] {
            assert_eq!(p, &paths[0]);
        }
        assert_relative_eq!(paths[0][0], DVector::from_column_slice(&[0.5, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn rest_agent_zero_noise_path_repeats_initial_state() {
        let model = AgentModel::unicycle(0.1, 0.05, 0.0, 0.0);
        let x0 = DVector::from_column_slice(&[2.0, 3.0, 0.0, 0.7]);
        let paths = sample_agent_paths(&model, &x0, 1, 0.1, 1, 0.0, 1, 0, 1).unwrap();
        assert_relative_eq!(paths[0][0], x0);
    }

    #[test]
    fn mean_actuated_displacement_matches_drift() {
        // Over 1e4 paths the mean one-step actuated displacement is f_d * eps
        // (zero for the unicycle) within 3 standard errors.
        let model = unicycle();
        let x0 = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.2]);
        let eps = 0.05;
        let count = 10_000;
        let paths = sample_agent_paths(&model, &x0, 1, eps, count, 0.0, 99, 0, 1).unwrap();
        let mut mean_v = 0.0;
        let mut mean_phi = 0.0;
        for p in &paths {
            mean_v += p[0][2] - x0[2];
            mean_phi += p[0][3] - x0[3];
        }
        mean_v /= count as f64;
        mean_phi /= count as f64;
        let se_v = 0.75 * eps.sqrt() / (count as f64).sqrt();
        let se_phi = 0.65 * eps.sqrt() / (count as f64).sqrt();
        assert!(mean_v.abs() < 3.0 * se_v, "mean_v = {mean_v}, se = {se_v}");
        assert!(mean_phi.abs() < 3.0 * se_phi);
    }

    #[test]
    fn single_member_joint_batch_equals_agent_paths() {
        let model = unicycle();
        let sub = Subsystem::singleton(1);
        let x0 = DVector::from_column_slice(&[1.0, 2.0, 0.5, 0.1]);
        let batch =
            sample_joint_batch(&model, &sub, &[x0.clone()], 4, 0.25, 3, 0.0, 7, 2).unwrap();
        let paths = sample_agent_paths(&model, &x0, 4, 0.25, 3, 0.0, 7, 2, 1).unwrap();
        for (r, p) in batch.rollouts.iter().zip(&paths) {
            assert_eq!(&r.steps, p);
        }
    }

    #[test]
    fn assembly_pairs_by_rollout_index() {
        let model = unicycle();
        let g = CommGraph::new(2, &[(1, 2)]).unwrap();
        let sub = g.subsystem(1).unwrap();
        let x1 = DVector::from_column_slice(&[0.0, 0.0, 0.3, 0.0]);
        let x2 = DVector::from_column_slice(&[5.0, 5.0, 0.3, 0.0]);
        let p1 = sample_agent_paths(&model, &x1, 2, 0.5, 2, 0.0, 11, 0, 1).unwrap();
        let p2 = sample_agent_paths(&model, &x2, 2, 0.5, 2, 0.0, 11, 0, 2).unwrap();
        let batch =
            assemble_joint_batch(&model, &sub, &[x1, x2], &[p1.clone(), p2.clone()], 0.5, 11, 0)
                .unwrap();
        for y in 0..2 {
            for k in 0..2 {
                assert_eq!(batch.rollouts[y].steps[k].rows(0, 4), p1[y][k].rows(0, 4));
                assert_eq!(batch.rollouts[y].steps[k].rows(4, 4), p2[y][k].rows(0, 4));
            }
        }
    }

    #[test]
    fn distributed_and_centralized_sampling_are_bit_identical() {
        let model = unicycle();
        let g = CommGraph::new(3, &[(1, 2), (2, 3), (1, 3)]).unwrap();
        let sub = g.subsystem(2).unwrap();
        let x0s: Vec<_> = (0..3)
            .map(|i| DVector::from_column_slice(&[i as f64, 0.0, 0.3, 0.0]))
            .collect();
        let central =
            sample_joint_batch(&model, &sub, &x0s, 5, 0.3, 8, 0.0, 21, 4).unwrap();
        let member_paths: Vec<_> = sub
            .members()
            .iter()
            .zip(&x0s)
            .map(|(&a, x0)| sample_agent_paths(&model, x0, 5, 0.3, 8, 0.0, 21, 4, a).unwrap())
            .collect();
        let assembled =
            assemble_joint_batch(&model, &sub, &x0s, &member_paths, 0.3, 21, 4).unwrap();
        assert_eq!(central.rollouts, assembled.rollouts);
    }

    #[test]
    fn same_seed_same_batch() {
        let model = unicycle();
        let sub = Subsystem::singleton(1);
        let x0 = DVector::from_column_slice(&[0.0, 0.0, 0.3, 0.0]);
        let a = sample_joint_batch(&model, &sub, &[x0.clone()], 3, 0.2, 10, 0.0, 5, 1).unwrap();
        let b = sample_joint_batch(&model, &sub, &[x0], 3, 0.2, 10, 0.0, 5, 1).unwrap();
        assert_eq!(a.rollouts, b.rollouts);
    }

    #[test]
    fn nonactuated_increments_are_exactly_drift() {
        let model = unicycle();
        let x0 = DVector::from_column_slice(&[0.0, 0.0, 1.3, 0.4]);
        let eps = 0.2;
        let paths = sample_agent_paths(&model, &x0, 4, eps, 6, 0.0, 3, 0, 1).unwrap();
        for p in &paths {
            let mut prev = x0.clone();
            for (step, s) in p.iter().enumerate() {
                let f = model.drift(prev.as_slice(), step as f64 * eps);
                assert_eq!(s[0], prev[0] + f[0] * eps);
                assert_eq!(s[1], prev[1] + f[1] * eps);
                prev = s.clone();
            }
        }
    }

    #[test]
    fn joint_increment_covariance_is_block_diagonal() {
        // Empirical covariance of the stacked actuated increments over 1e4
        // joint rollouts approaches block-diag(eps * H_agent); off-diagonal
        // (cross-agent) blocks vanish.
        let model = unicycle();
        let g = CommGraph::new(2, &[(1, 2)]).unwrap();
        let sub = g.subsystem(1).unwrap();
        let x0s = vec![
            DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]),
            DVector::from_column_slice(&[4.0, 4.0, 1.0, 0.0]),
        ];
        let eps = 0.02;
        let count = 10_000;
        let batch = sample_joint_batch(&model, &sub, &x0s, 1, eps, count, 0.0, 77, 0).unwrap();
        let mut cov = nalgebra::DMatrix::zeros(4, 4);
        for r in &batch.rollouts {
            let d = DVector::from_column_slice(&[
                r.steps[0][2] - x0s[0][2],
                r.steps[0][3] - x0s[0][3],
                r.steps[0][6] - x0s[1][2],
                r.steps[0][7] - x0s[1][3],
            ]);
            cov += &d * d.transpose();
        }
        cov /= count as f64;
        let h = [0.75 * 0.75, 0.65 * 0.65, 0.75 * 0.75, 0.65 * 0.65];
        for i in 0..4 {
            assert_relative_eq!(cov[(i, i)], eps * h[i], max_relative = 0.03);
            for j in 0..4 {
                if i != j {
                    assert!(cov[(i, j)].abs() < 0.03 * eps * h[i].max(h[j]));
                }
            }
        }
    }
}
