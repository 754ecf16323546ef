//! Receding-horizon closed-loop execution: every control cycle each agent
//! samples passive rollouts of its own subsystem, scores them, estimates
//! its local control, and the world advances one step under the applied
//! controls and the model noise.

use std::time::Instant;

use nalgebra::DVector;

use crate::costs::SubsystemCost;
use crate::dynamics::{euler_maruyama_step, AgentModel, NoiseKind};
use crate::error::{Error, Result};
use crate::network::CommGraph;
use crate::pic::{self, PathValueConvention, WeightMode};
use crate::sampler::sample_joint_batch;
use crate::seed;

/// When a trial ends before the nominal final time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitRule {
    /// Run until `t_f` regardless of progress.
    TimeOnly,
    /// Stop early once every agent with a goal is within `radius` of it.
    GoalBall { radius: f64 },
}

/// Everything needed to execute one mission.
pub struct Problem {
    pub graph: CommGraph,
    pub model: AgentModel,
    /// Initial state of each agent, indexed 0..n (agent i at position i-1).
    pub init: Vec<DVector<f64>>,
    /// Subsystem cost of each agent, same indexing as `init`.
    pub costs: Vec<Box<dyn SubsystemCost>>,
    /// Goal position per agent, used by `ExitRule::GoalBall` and reporting.
    pub goals: Vec<Option<[f64; 2]>>,
    pub t_f: f64,
    /// Control cycle length (world integration step).
    pub dt: f64,
    /// Nominal number of horizon segments.
    pub k: usize,
    /// Rollouts per agent per cycle.
    pub rollouts: usize,
    pub lambda: f64,
    pub convention: PathValueConvention,
    pub weight_mode: WeightMode,
    pub exit: ExitRule,
}

impl Problem {
    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_agents();
        if self.init.len() != n || self.costs.len() != n || self.goals.len() != n {
            return Err(Error::Dimension(format!(
                "problem arrays must all have length {n}"
            )));
        }
        let m = self.model.state_dim();
        if let Some(x) = self.init.iter().find(|x| x.len() != m) {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {m}",
                x.len()
            )));
        }
        if !(self.dt > 0.0) || !(self.t_f > self.dt) {
            return Err(Error::Dimension(
                "need t_f > dt > 0 for at least one control cycle".into(),
            ));
        }
        if self.k == 0 || self.rollouts == 0 || !(self.lambda > 0.0) {
            return Err(Error::Dimension(
                "k, rollouts and lambda must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Horizon schedule at time `t`: segment length `eps = (t_f - t) / k`,
/// clamped from below at the control cycle `dt`; when the clamp binds the
/// segment count shrinks to `max(1, floor((t_f - t) / dt))` so the horizon
/// never extends past `t_f` by more than one segment.
pub fn schedule_eps(t: f64, t_f: f64, k: usize, dt: f64) -> Result<(f64, usize)> {
    if k == 0 || !(dt > 0.0) {
        return Err(Error::Dimension("k and dt must be positive".into()));
    }
    let remaining = t_f - t;
    if !(remaining > 0.0) {
        return Err(Error::Dimension(format!(
            "no time remaining at t = {t} with t_f = {t_f}"
        )));
    }
    let eps = remaining / k as f64;
    if eps < dt {
        let k_eff = ((remaining / dt).floor() as usize).max(1);
        Ok((dt, k_eff))
    } else {
        Ok((eps, k))
    }
}

/// Per-agent planning diagnostics of one cycle.
#[derive(Debug, Clone)]
pub struct AgentDiag {
    pub agent: usize,
    /// Effective sample size of the rollout weights.
    pub ess: f64,
    /// Smallest and mean selector value over the batch.
    pub s_min: f64,
    pub s_mean: f64,
    /// Norm of the applied local control.
    pub u_norm: f64,
    /// Wall-clock planning time in seconds.
    pub plan_secs: f64,
}

/// Diagnostics of one control cycle.
#[derive(Debug, Clone)]
pub struct CycleDiag {
    pub cycle: usize,
    pub t: f64,
    pub eps: f64,
    pub k_eff: usize,
    pub agents: Vec<AgentDiag>,
}

/// One executed trial: state snapshots at every cycle boundary (including
/// the initial one), the controls applied during each cycle, and per-cycle
/// diagnostics. A failed trial keeps whatever was produced before the
/// failure and records the reason.
#[derive(Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// `times[c]` is the time of snapshot `states[c]`.
    pub times: Vec<f64>,
    /// `states[c][i]` is agent i+1 at cycle boundary c.
    pub states: Vec<Vec<DVector<f64>>>,
    /// `controls[c][i]` is the control applied by agent i+1 during cycle c.
    pub controls: Vec<Vec<DVector<f64>>>,
    pub diags: Vec<CycleDiag>,
    pub failure: Option<String>,
}

impl TrialResult {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    /// Final snapshot, if any cycle ran.
    pub fn final_states(&self) -> Option<&Vec<DVector<f64>>> {
        self.states.last()
    }
}

fn goals_reached(problem: &Problem, states: &[DVector<f64>], radius: f64) -> bool {
    problem.goals.iter().zip(states).all(|(g, x)| match g {
        Some(goal) => {
            let dx = x[0] - goal[0];
            let dy = x[1] - goal[1];
            (dx * dx + dy * dy).sqrt() <= radius
        }
        None => true,
    })
}

/// Plans every agent's control at one cycle from a shared world snapshot.
/// Returns the per-agent local controls alongside diagnostics; the world is
/// not advanced here.
pub fn plan_cycle(
    problem: &Problem,
    states: &[DVector<f64>],
    cycle: usize,
    t: f64,
    trial_seed: u64,
) -> Result<(Vec<DVector<f64>>, CycleDiag)> {
    let (eps, k_eff) = schedule_eps(t, problem.t_f, problem.k, problem.dt)?;
    let n = problem.n_agents();
    let mut controls = Vec::with_capacity(n);
    let mut diags = Vec::with_capacity(n);
    for agent in 1..=n {
        let start = Instant::now();
        let sub = problem.graph.subsystem(agent)?;
        let member_x0: Vec<DVector<f64>> = sub
            .members()
            .iter()
            .map(|&j| states[j - 1].clone())
            .collect();
        let batch = sample_joint_batch(
            &problem.model,
            &sub,
            &member_x0,
            k_eff,
            eps,
            problem.rollouts,
            t,
            trial_seed,
            cycle,
        )?;
        let (scores, est) = pic::plan(
            problem.costs[agent - 1].as_ref(),
            &problem.model,
            &batch,
            problem.lambda,
            problem.convention,
            problem.weight_mode,
            t,
        )
        .map_err(|e| Error::Trial {
            cycle,
            message: format!("agent {agent}: {e}"),
        })?;
        if est.ess < 0.05 * problem.rollouts as f64 {
            log::warn!(
                "cycle {cycle} agent {agent}: effective sample size {:.1} below 5% of {} rollouts",
                est.ess,
                problem.rollouts
            );
        }
        let selector: Vec<f64> = match problem.weight_mode {
            WeightMode::PathValue => scores.iter().map(|s| s.s_tilde).collect(),
            WeightMode::CostImportance => scores.iter().map(|s| s.cost_value).collect(),
        };
        let s_min = selector.iter().cloned().fold(f64::INFINITY, f64::min);
        let s_mean = selector.iter().sum::<f64>() / selector.len() as f64;
        diags.push(AgentDiag {
            agent,
            ess: est.ess,
            s_min,
            s_mean,
            u_norm: est.local.norm(),
            plan_secs: start.elapsed().as_secs_f64(),
        });
        controls.push(est.local);
    }
    Ok((
        controls,
        CycleDiag {
            cycle,
            t,
            eps,
            k_eff,
            agents: diags,
        },
    ))
}

/// Advances every agent one control cycle under its applied control and the
/// model (execution) noise.
pub fn advance_world(
    problem: &Problem,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    cycle: usize,
    t: f64,
    trial_seed: u64,
) -> Result<Vec<DVector<f64>>> {
    states
        .iter()
        .zip(controls)
        .enumerate()
        .map(|(idx, (x, u))| {
            let agent = idx + 1;
            let mut rng = seed::world_stream(trial_seed, cycle, agent);
            euler_maruyama_step(
                &problem.model,
                x,
                Some(u),
                NoiseKind::Model,
                problem.dt,
                t,
                &mut rng,
            )
            .map_err(|e| Error::Trial {
                cycle,
                message: format!("agent {agent}: {e}"),
            })
        })
        .collect()
}

/// Executes one full trial. Planning or integration failures end the trial
/// early and are recorded on the result rather than returned as errors.
pub fn run_trial(problem: &Problem, trial: usize, base_seed: u64) -> TrialResult {
    let trial_seed = seed::trial_seed(base_seed, trial);
    let mut result = TrialResult {
        trial,
        seed: trial_seed,
        times: vec![0.0],
        states: vec![problem.init.clone()],
        controls: Vec::new(),
        diags: Vec::new(),
        failure: None,
    };
    if let Err(e) = problem.validate() {
        result.failure = Some(e.to_string());
        return result;
    }
    let n_cycles = (problem.t_f / problem.dt).round() as usize;
    for cycle in 0..n_cycles {
        let t = cycle as f64 * problem.dt;
        let states = result.states.last().unwrap().clone();
        if let ExitRule::GoalBall { radius } = problem.exit {
            if goals_reached(problem, &states, radius) {
                break;
            }
        }
        let (controls, diag) = match plan_cycle(problem, &states, cycle, t, trial_seed) {
            Ok(v) => v,
            Err(e) => {
                result.failure = Some(e.to_string());
                return result;
            }
        };
        let next = match advance_world(problem, &states, &controls, cycle, t, trial_seed) {
            Ok(v) => v,
            Err(e) => {
                result.failure = Some(e.to_string());
                return result;
            }
        };
        result.controls.push(controls);
        result.diags.push(diag);
        result.times.push((cycle + 1) as f64 * problem.dt);
        result.states.push(next);
    }
    result
}

/// Runs `trials` independent trials with per-trial derived seeds. Individual
/// failures are recorded on their results, never fatal to the batch.
pub fn run_trials(problem: &Problem, trials: usize, base_seed: u64) -> Vec<TrialResult> {
    (0..trials)
        .map(|trial| run_trial(problem, trial, base_seed))
        .collect()
}
