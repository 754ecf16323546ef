//! Scenario configuration: TOML schema, validation, bundled scenarios, and
//! conversion into an executable [`Problem`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::costs::{
    control_weight_mismatch, derive_control_weight, DistanceCost, Obstacle, SubsystemCost,
    TerminalCost,
};
use crate::dynamics::{AgentModel, NoiseKind};
use crate::error::{Error, Result};
use crate::network::CommGraph;
use crate::pic::{PathValueConvention, WeightMode};
use crate::runner::{ExitRule, Problem};

fn default_trials() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub n_agents: usize,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unicycle,
    Integrator1d,
}

/// Agent model parameters: `sigma`/`nu` are the execution (model) noise
/// scales, `sigma_s`/`nu_s` the rollout sampling scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub sigma: f64,
    #[serde(default)]
    pub nu: f64,
    pub sigma_s: f64,
    #[serde(default)]
    pub nu_s: f64,
}

impl ModelSpec {
    pub fn build(&self) -> Result<AgentModel> {
        match self.kind {
            ModelKind::Unicycle => {
                Ok(AgentModel::unicycle(self.sigma, self.nu, self.sigma_s, self.nu_s))
            }
            ModelKind::Integrator1d => Ok(AgentModel::integrator_1d(self.sigma, self.sigma_s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RMode {
    /// `R = lambda (sigma_s sigma_s^T)^{-1}`, the consistency condition.
    Derived,
    /// A supplied diagonal, checked against the derived one; mismatch warns.
    ExplicitLenient,
    /// As above, but mismatch beyond 1e-6 relative is an error.
    ExplicitStrict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    TimeOnly,
    GoalBall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub convention: PathValueConvention,
    #[serde(default = "ControlSpec::default_r_mode")]
    pub r_mode: RMode,
    /// Per-agent diagonal of the explicit control weight matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_diag: Option<Vec<f64>>,
    #[serde(default = "ControlSpec::default_exit")]
    pub exit: ExitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
}

impl ControlSpec {
    fn default_r_mode() -> RMode {
        RMode::Derived
    }
    fn default_exit() -> ExitKind {
        ExitKind::TimeOnly
    }
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self {
            weight_mode: WeightMode::default(),
            convention: PathValueConvention::default(),
            r_mode: RMode::Derived,
            r_diag: None,
            exit: ExitKind::TimeOnly,
            goal_radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub init: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[f64; 2]>,
    /// Goal-attraction weight `w_ii`.
    #[serde(default)]
    pub w_self: f64,
}

/// Directed pair weight: the cost of agent `i` includes
/// `w * (||p_i - p_j|| - d_ij)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairWeight {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairReg {
    pub i: usize,
    pub j: usize,
    pub d: f64,
}

/// Regularizing offsets of the distance costs. `auto_initial` assigns every
/// offset from the distances at scenario start; `explicit` uses the listed
/// values, defaulting to zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizers {
    AutoInitial,
    Explicit {
        #[serde(default)]
        goal: Vec<f64>,
        #[serde(default)]
        pairs: Vec<PairReg>,
    },
}

impl Default for Regularizers {
    fn default() -> Self {
        Regularizers::AutoInitial
    }
}

/// Full scenario configuration as read from a TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    pub t_f: f64,
    pub dt: f64,
    pub k: usize,
    pub rollouts: usize,
    /// Defaults to 1 with a logged notice when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub graph: GraphSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub control: ControlSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub pairs: Vec<PairWeight>,
    #[serde(default)]
    pub regularizers: Regularizers,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Pairwise distances aggregated in the summary output; defaults to all
    /// pairs carrying a positive weight.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub report_pairs: Vec<[usize; 2]>,
    /// Clamp the total running cost at zero from below.
    #[serde(default = "default_true")]
    pub clamp_running_cost: bool,
}

fn scenario_err(field: &str, message: impl Into<String>) -> Error {
    Error::Scenario {
        field: field.into(),
        message: message.into(),
    }
}

impl Scenario {
    /// Parses a scenario from TOML text without resolving defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Loads and validates a scenario: a filesystem path, or the name of a
    /// bundled scenario.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let text = if Path::new(name_or_path).is_file() {
            std::fs::read_to_string(name_or_path)?
        } else if let Some(bundled) = builtin(name_or_path) {
            bundled.to_string()
        } else {
            return Err(scenario_err(
                "scenario",
                format!(
                    "`{name_or_path}` is neither a readable file nor a bundled scenario ({})",
                    builtin_names().join(", ")
                ),
            ));
        };
        let mut scenario = Self::from_toml(&text)?;
        scenario.resolve()?;
        Ok(scenario)
    }

    /// Validates the configuration and fills every documented default in
    /// place, so that serializing afterwards echoes the fully-resolved
    /// scenario.
    pub fn resolve(&mut self) -> Result<()> {
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = CommGraph::new(self.graph.n_agents, &edges)?;
        graph.require_connected()?;
        let n = graph.n_agents();
        if self.agents.len() != n {
            return Err(scenario_err(
                "agents",
                format!("{} agent tables for {n} graph agents", self.agents.len()),
            ));
        }
        let model = self.model.build()?;
        let m = model.state_dim();
        for (idx, a) in self.agents.iter().enumerate() {
            if a.init.len() != m {
                return Err(scenario_err(
                    &format!("agents[{idx}].init"),
                    format!("length {} but the model state has {m} components", a.init.len()),
                ));
            }
            if a.init.iter().any(|v| !v.is_finite()) {
                return Err(scenario_err(&format!("agents[{idx}].init"), "non-finite value"));
            }
            if a.w_self < 0.0 {
                return Err(scenario_err(&format!("agents[{idx}].w_self"), "must be nonnegative"));
            }
            if a.w_self > 0.0 && a.goal.is_none() {
                return Err(scenario_err(
                    &format!("agents[{idx}].goal"),
                    "required when w_self > 0",
                ));
            }
        }
        for (idx, p) in self.pairs.iter().enumerate() {
            let field = format!("pairs[{idx}]");
            if p.i == p.j || p.i < 1 || p.i > n || p.j < 1 || p.j > n {
                return Err(scenario_err(&field, format!("invalid agent pair ({}, {})", p.i, p.j)));
            }
            if p.w < 0.0 {
                return Err(scenario_err(&field, "weight must be nonnegative"));
            }
            if p.w > 0.0 && !graph.has_edge(p.i, p.j) {
                return Err(scenario_err(
                    &field,
                    format!(
                        "w_{{{},{}}} > 0 but ({}, {}) is not a communication edge",
                        p.i, p.j, p.i, p.j
                    ),
                ));
            }
        }
        if !(self.dt > 0.0) || !(self.t_f > self.dt) {
            return Err(scenario_err("t_f", "need t_f > dt > 0"));
        }
        if self.k == 0 {
            return Err(scenario_err("k", "must be at least 1"));
        }
        if self.rollouts == 0 {
            return Err(scenario_err("rollouts", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(scenario_err("trials", "must be at least 1"));
        }
        if self.model.sigma_s <= 0.0
            || (self.model.kind == ModelKind::Unicycle && self.model.nu_s <= 0.0)
        {
            return Err(scenario_err(
                "model",
                "sampling noise scales must be positive (positive-definite H)",
            ));
        }
        match self.lambda {
            None => {
                log::info!("scenario `{}`: lambda not set, defaulting to 1", self.name);
                self.lambda = Some(1.0);
            }
            Some(l) if l <= 0.0 || !l.is_finite() => {
                return Err(scenario_err("lambda", "must be positive and finite"));
            }
            _ => {}
        }
        if self.control.exit == ExitKind::GoalBall && self.control.goal_radius.is_none() {
            return Err(scenario_err("control.goal_radius", "required for goal_ball exit"));
        }
        if m < 2
            && (self.agents.iter().any(|a| a.w_self > 0.0)
                || self.pairs.iter().any(|p| p.w > 0.0)
                || !self.obstacles.is_empty())
        {
            return Err(scenario_err(
                "model",
                "distance costs and obstacles need planar positions; \
                 scalar models only support zero state-related cost",
            ));
        }
        self.check_control_weight(&model)?;
        for (idx, o) in self.obstacles.iter().enumerate() {
            if o.x_min >= o.x_max || o.y_min >= o.y_max || o.penalty < 0.0 {
                return Err(scenario_err(
                    &format!("obstacles[{idx}]"),
                    "need x_min < x_max, y_min < y_max, penalty >= 0",
                ));
            }
        }
        self.regularizers = self.resolved_regularizers(m)?;
        if self.report_pairs.is_empty() {
            let mut seen = std::collections::BTreeSet::new();
            for p in &self.pairs {
                if p.w > 0.0 {
                    seen.insert((p.i.min(p.j), p.i.max(p.j)));
                }
            }
            self.report_pairs = seen.into_iter().map(|(i, j)| [i, j]).collect();
        } else {
            for (idx, rp) in self.report_pairs.iter().enumerate() {
                if rp[0] == rp[1] || rp.iter().any(|&a| a < 1 || a > n) {
                    return Err(scenario_err(
                        &format!("report_pairs[{idx}]"),
                        format!("invalid agent pair ({}, {})", rp[0], rp[1]),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_control_weight(&self, model: &AgentModel) -> Result<()> {
        let lambda = self.lambda.unwrap_or(1.0);
        let sigma = model.noise_scale(NoiseKind::Sampling);
        let derived = derive_control_weight(sigma, lambda)?;
        match self.control.r_mode {
            RMode::Derived => Ok(()),
            mode => {
                let diag = self.control.r_diag.as_ref().ok_or_else(|| {
                    scenario_err("control.r_diag", "required for explicit R modes")
                })?;
                if diag.len() != model.act_dim() {
                    return Err(scenario_err(
                        "control.r_diag",
                        format!("expected {} diagonal entries", model.act_dim()),
                    ));
                }
                let supplied = nalgebra::DMatrix::from_diagonal(&DVector::from_column_slice(diag));
                let rel = control_weight_mismatch(&supplied, &derived);
                if rel > 1e-6 {
                    if mode == RMode::ExplicitStrict {
                        return Err(scenario_err(
                            "control.r_diag",
                            format!(
                                "relative mismatch {rel:.3e} against the derived \
                                 R = lambda (sigma_s sigma_s^T)^-1"
                            ),
                        ));
                    }
                    log::warn!(
                        "scenario `{}`: explicit R deviates from the derived consistency \
                         condition by {rel:.3e}; the sampler uses the derived weights",
                        self.name
                    );
                }
                Ok(())
            }
        }
    }

    fn position(&self, agent: usize) -> [f64; 2] {
        let a = &self.agents[agent - 1];
        [a.init[0], *a.init.get(1).unwrap_or(&0.0)]
    }

    fn resolved_regularizers(&self, state_dim: usize) -> Result<Regularizers> {
        match &self.regularizers {
            Regularizers::AutoInitial => {
                if state_dim < 2 {
                    return Err(scenario_err(
                        "regularizers",
                        "auto_initial needs planar positions",
                    ));
                }
                let goal = self
                    .agents
                    .iter()
                    .map(|a| match a.goal {
                        Some(g) => {
                            ((a.init[0] - g[0]).powi(2) + (a.init[1] - g[1]).powi(2)).sqrt()
                        }
                        None => 0.0,
                    })
                    .collect();
                let pairs = self
                    .pairs
                    .iter()
                    .map(|p| {
                        let pi = self.position(p.i);
                        let pj = self.position(p.j);
                        PairReg {
                            i: p.i,
                            j: p.j,
                            d: ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt(),
                        }
                    })
                    .collect();
                Ok(Regularizers::Explicit { goal, pairs })
            }
            Regularizers::Explicit { goal, pairs } => {
                if !goal.is_empty() && goal.len() != self.agents.len() {
                    return Err(scenario_err(
                        "regularizers.goal",
                        format!("expected {} entries or none", self.agents.len()),
                    ));
                }
                if goal.iter().any(|d| *d < 0.0 || !d.is_finite())
                    || pairs.iter().any(|p| p.d < 0.0 || !p.d.is_finite())
                {
                    return Err(scenario_err(
                        "regularizers",
                        "offsets must be finite and nonnegative",
                    ));
                }
                Ok(Regularizers::Explicit {
                    goal: goal.clone(),
                    pairs: pairs.clone(),
                })
            }
        }
    }

    /// Builds the executable problem. Call after [`Scenario::resolve`]
    /// (or use [`Scenario::load`], which resolves).
    pub fn build_problem(&self) -> Result<Problem> {
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = CommGraph::new(self.graph.n_agents, &edges)?;
        let model = self.model.build()?;
        let m = model.state_dim();
        let lambda = self.lambda.unwrap_or(1.0);
        let (reg_goal, reg_pairs) = match &self.regularizers {
            Regularizers::Explicit { goal, pairs } => {
                let mut map = BTreeMap::new();
                for p in pairs {
                    map.insert((p.i, p.j), p.d);
                }
                (goal.clone(), map)
            }
            Regularizers::AutoInitial => {
                return Err(scenario_err("regularizers", "unresolved; call resolve() first"))
            }
        };
        let mut weights = BTreeMap::new();
        for p in &self.pairs {
            weights.insert((p.i, p.j), p.w);
        }
        let n = graph.n_agents();
        let mut costs: Vec<Box<dyn SubsystemCost>> = Vec::with_capacity(n);
        if m < 2 {
            // Scalar models carry no state-related cost (validated above).
            for _ in 0..n {
                costs.push(Box::new(crate::costs::FnCost {
                    running: |_: &DVector<f64>, _: f64| 0.0,
                    terminal: |_: &DVector<f64>| 0.0,
                }));
            }
            return self.finish_problem(graph, model, costs, lambda);
        }
        for agent in 1..=n {
            let sub = graph.subsystem(agent)?;
            let spec = &self.agents[agent - 1];
            let goal = spec.goal.unwrap_or([0.0, 0.0]);
            let goal_reg = reg_goal.get(agent - 1).copied().unwrap_or(0.0);
            let mut pair_terms = Vec::new();
            for (pos, &member) in sub.members().iter().enumerate() {
                if member == agent {
                    continue;
                }
                let w = weights.get(&(agent, member)).copied().unwrap_or(0.0);
                if w > 0.0 {
                    let d = reg_pairs.get(&(agent, member)).copied().unwrap_or(0.0);
                    pair_terms.push((pos, w, d));
                }
            }
            let mut cost = DistanceCost::new(
                m,
                goal,
                spec.w_self,
                goal_reg,
                pair_terms,
                self.obstacles.clone(),
                TerminalCost::Zero,
            )?;
            cost.clamp = self.clamp_running_cost;
            costs.push(Box::new(cost));
        }
        self.finish_problem(graph, model, costs, lambda)
    }

    fn finish_problem(
        &self,
        graph: CommGraph,
        model: AgentModel,
        costs: Vec<Box<dyn SubsystemCost>>,
        lambda: f64,
    ) -> Result<Problem> {
        Ok(Problem {
            graph,
            model,
            init: self
                .agents
                .iter()
                .map(|a| DVector::from_column_slice(&a.init))
                .collect(),
            costs,
            goals: self.agents.iter().map(|a| a.goal).collect(),
            t_f: self.t_f,
            dt: self.dt,
            k: self.k,
            rollouts: self.rollouts,
            lambda,
            convention: self.control.convention,
            weight_mode: self.control.weight_mode,
            exit: match self.control.exit {
                ExitKind::TimeOnly => ExitRule::TimeOnly,
                ExitKind::GoalBall => ExitRule::GoalBall {
                    radius: self.control.goal_radius.unwrap_or(1.0),
                },
            },
        })
    }

    /// Fully-resolved scenario as TOML, suitable as the echo artifact.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Bundled scenario source by name.
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "fig3_joint" => Some(include_str!("../scenarios/fig3_joint.toml")),
        "fig3_independent" => Some(include_str!("../scenarios/fig3_independent.toml")),
        "fig4_pair" => Some(include_str!("../scenarios/fig4_pair.toml")),
        "fig5_obstacles" => Some(include_str!("../scenarios/fig5_obstacles.toml")),
        "fig6_nine_agents" => Some(include_str!("../scenarios/fig6_nine_agents.toml")),
        "lq1d" => Some(include_str!("../scenarios/lq1d.toml")),
        "single_agent" => Some(include_str!("../scenarios/single_agent.toml")),
        _ => None,
    }
}

pub fn builtin_names() -> Vec<&'static str> {
    vec![
        "fig3_joint",
        "fig3_independent",
        "fig4_pair",
        "fig5_obstacles",
        "fig6_nine_agents",
        "lq1d",
        "single_agent",
    ]
}
