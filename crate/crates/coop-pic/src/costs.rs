//! Joint running and terminal costs, control-weight matrices, and the
//! noise-cost consistency condition.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::AgentModel;
use crate::error::{Error, Result};

/// Axis-aligned rectangular obstacle with its interior penalty. When the
/// center agent is inside, the penalty replaces the distance cost.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Obstacle {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub penalty: f64,
}

impl Obstacle {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// State-related running cost and terminal cost of one factorial subsystem.
pub trait SubsystemCost: Send + Sync {
    /// Nonnegative running cost q at joint state `x`.
    fn running(&self, x: &DVector<f64>, t: f64) -> f64;

    /// Terminal cost phi at the exit joint state.
    fn terminal(&self, x: &DVector<f64>) -> f64;

    /// Gradient of the running cost with respect to the directly-actuated
    /// coordinates of every member. Defaults to central finite differences
    /// with step `1e-5 * max(1, ||x||)`.
    fn running_grad_actuated(&self, x: &DVector<f64>, t: f64, model: &AgentModel) -> DVector<f64> {
        finite_diff_grad_actuated(|y, tt| self.running(y, tt), x, t, model)
    }
}

/// Central finite differences of `f` over the actuated coordinates.
pub fn finite_diff_grad_actuated<F: Fn(&DVector<f64>, f64) -> f64>(
    f: F,
    x: &DVector<f64>,
    t: f64,
    model: &AgentModel,
) -> DVector<f64> {
    let (m, u, d) = (model.state_dim(), model.nonact_dim(), model.act_dim());
    let n = x.len() / m;
    let h = 1e-5 * x.norm().max(1.0);
    let mut grad = DVector::zeros(d * n);
    let mut probe = x.clone();
    for a in 0..n {
        for j in 0..d {
            let idx = a * m + u + j;
            probe[idx] = x[idx] + h;
            let plus = f(&probe, t);
            probe[idx] = x[idx] - h;
            let minus = f(&probe, t);
            probe[idx] = x[idx];
            grad[a * d + j] = (plus - minus) / (2.0 * h);
        }
    }
    grad
}

/// Terminal cost variants available to scenarios.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    Zero,
    /// `sum_j kappa * ||p_j - goal_j||^2` over all members.
    QuadraticGoals { kappa: f64, goals: Vec<[f64; 2]> },
}

/// Distance-based running cost of a subsystem centered on one agent:
/// a goal-attraction term for the center plus one pair term per neighbor,
/// each regularized by a fixed offset, clamped at zero from below, with an
/// obstacle penalty overriding the distance cost when the center is inside
/// a region.
///
/// Positions are the first two coordinates of each member state block.
#[derive(Debug, Clone)]
pub struct DistanceCost {
    state_dim: usize,
    /// Center goal position.
    pub goal: [f64; 2],
    /// Goal-attraction weight of the center agent.
    pub goal_weight: f64,
    /// Regularizing offset subtracted from the goal distance.
    pub goal_reg: f64,
    /// Per-neighbor pair terms: (member position, weight, offset).
    pub pairs: Vec<(usize, f64, f64)>,
    pub obstacles: Vec<Obstacle>,
    pub terminal: TerminalCost,
    /// Clamp the total running cost at zero from below.
    pub clamp: bool,
}

impl DistanceCost {
    pub fn new(
        state_dim: usize,
        goal: [f64; 2],
        goal_weight: f64,
        goal_reg: f64,
        pairs: Vec<(usize, f64, f64)>,
        obstacles: Vec<Obstacle>,
        terminal: TerminalCost,
    ) -> Result<Self> {
        if state_dim < 2 {
            return Err(Error::Dimension(
                "distance cost needs at least two position coordinates".into(),
            ));
        }
        if goal_weight < 0.0 || pairs.iter().any(|&(_, w, _)| w < 0.0) {
            return Err(Error::Scenario {
                field: "weights".into(),
                message: "cost weights must be nonnegative".into(),
            });
        }
        if !goal_reg.is_finite()
            || goal_reg < 0.0
            || pairs.iter().any(|&(_, _, d)| !d.is_finite() || d < 0.0)
        {
            return Err(Error::Scenario {
                field: "regularizers".into(),
                message: "regularizers must be finite and nonnegative".into(),
            });
        }
        Ok(Self {
            state_dim,
            goal,
            goal_weight,
            goal_reg,
            pairs,
            obstacles,
            terminal,
            clamp: true,
        })
    }

    fn position(&self, x: &DVector<f64>, pos: usize) -> (f64, f64) {
        (x[pos * self.state_dim], x[pos * self.state_dim + 1])
    }
}

impl SubsystemCost for DistanceCost {
    fn running(&self, x: &DVector<f64>, _t: f64) -> f64 {
        let (cx, cy) = self.position(x, 0);
        for obs in &self.obstacles {
            if obs.contains(cx, cy) {
                return obs.penalty;
            }
        }
        let goal_dist = ((cx - self.goal[0]).powi(2) + (cy - self.goal[1]).powi(2)).sqrt();
        let mut q = self.goal_weight * (goal_dist - self.goal_reg);
        for &(pos, w, reg) in &self.pairs {
            let (px, py) = self.position(x, pos);
            let pair_dist = ((cx - px).powi(2) + (cy - py).powi(2)).sqrt();
            q += w * (pair_dist - reg);
        }
        if self.clamp {
            q.max(0.0)
        } else {
            q
        }
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        match &self.terminal {
            TerminalCost::Zero => 0.0,
            TerminalCost::QuadraticGoals { kappa, goals } => goals
                .iter()
                .enumerate()
                .map(|(pos, g)| {
                    let (px, py) = self.position(x, pos);
                    kappa * ((px - g[0]).powi(2) + (py - g[1]).powi(2))
                })
                .sum(),
        }
    }

    fn running_grad_actuated(&self, x: &DVector<f64>, t: f64, model: &AgentModel) -> DVector<f64> {
        // Positions live in the non-actuated block whenever the model keeps
        // at least the two leading coordinates passive; the actuated
        // gradient is then identically zero.
        if model.nonact_dim() >= 2 {
            DVector::zeros(model.act_dim() * (x.len() / model.state_dim()))
        } else {
            finite_diff_grad_actuated(|y, tt| self.running(y, tt), x, t, model)
        }
    }
}

/// Cost defined by plain closures, mostly for oracles and tests.
pub struct FnCost<Q, P>
where
    Q: Fn(&DVector<f64>, f64) -> f64 + Send + Sync,
    P: Fn(&DVector<f64>) -> f64 + Send + Sync,
{
    pub running: Q,
    pub terminal: P,
}

impl<Q, P> SubsystemCost for FnCost<Q, P>
where
    Q: Fn(&DVector<f64>, f64) -> f64 + Send + Sync,
    P: Fn(&DVector<f64>) -> f64 + Send + Sync,
{
    fn running(&self, x: &DVector<f64>, t: f64) -> f64 {
        (self.running)(x, t)
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        (self.terminal)(x)
    }
}

/// Control weight implied by the noise-cost consistency condition:
/// `R = lambda * (sigma sigma^T)^{-1}` for the joint sampling noise scale.
pub fn derive_control_weight(sigma_joint: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda <= 0.0 {
        return Err(Error::Scenario {
            field: "lambda".into(),
            message: "lambda must be positive".into(),
        });
    }
    let gram = sigma_joint * sigma_joint.transpose();
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("sigma sigma^T is singular".into()))?;
    Ok(inv * lambda)
}

/// Relative deviation of a supplied control weight from the derived one.
pub fn control_weight_mismatch(supplied: &DMatrix<f64>, derived: &DMatrix<f64>) -> f64 {
    (supplied - derived).norm() / derived.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uav1_cost() -> DistanceCost {
        // Center agent 1 with neighbor agent 3 at member position 1.
        DistanceCost::new(
            4,
            [35.0, 20.0],
            0.7,
            1125.0f64.sqrt(),
            vec![(1, 1.4, 30.0)],
            vec![],
            TerminalCost::Zero,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_zero_cost() {
        let c = DistanceCost::new(4, [0.0, 0.0], 0.0, 0.0, vec![], vec![], TerminalCost::Zero)
            .unwrap();
        let x = DVector::from_column_slice(&[3.0, 4.0, 1.0, 0.2]);
        assert_eq!(c.running(&x, 0.0), 0.0);
    }

    #[test]
    fn initial_state_with_initial_regularizers_is_zero() {
        let c = uav1_cost();
        // Agent 1 at (5,5), agent 3 at (5,35): both terms vanish.
        let x = DVector::from_column_slice(&[5.0, 5.0, 0.3, 0.0, 5.0, 35.0, 0.3, 0.0]);
        assert_relative_eq!(c.running(&x, 0.0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn obstacle_interior_returns_penalty() {
        let mut c = uav1_cost();
        c.obstacles.push(Obstacle {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 10.0,
            y_max: 10.0,
            penalty: 120.0,
        });
        let x = DVector::from_column_slice(&[5.0, 5.0, 0.3, 0.0, 5.0, 35.0, 0.3, 0.0]);
        assert_eq!(c.running(&x, 0.0), 120.0);
    }

    #[test]
    fn running_cost_is_clamped_at_zero() {
        let c = uav1_cost();
        // Both agents sitting on the goal: raw value is negative, clamp to 0.
        let x = DVector::from_column_slice(&[35.0, 20.0, 0.0, 0.0, 35.0, 20.0, 0.0, 0.0]);
        assert_eq!(c.running(&x, 0.0), 0.0);
    }

    #[test]
    fn pair_term_symmetry() {
        // Swapping the two agents' positions leaves the pair distance, and
        // hence the pair term, unchanged.
        let c = DistanceCost::new(4, [0.0, 0.0], 0.0, 0.0, vec![(1, 2.0, 5.0)], vec![], TerminalCost::Zero)
            .unwrap();
        let a = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.0, 7.0, -3.0, 0.0, 0.0]);
        let b = DVector::from_column_slice(&[7.0, -3.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert_relative_eq!(c.running(&a, 0.0), c.running(&b, 0.0));
    }

    #[test]
    fn independent_costs_sum_when_pairs_vanish() {
        let joint = DistanceCost::new(
            4,
            [10.0, 0.0],
            0.5,
            0.0,
            vec![(1, 0.0, 0.0)],
            vec![],
            TerminalCost::Zero,
        )
        .unwrap();
        let solo = DistanceCost::new(4, [10.0, 0.0], 0.5, 0.0, vec![], vec![], TerminalCost::Zero)
            .unwrap();
        let x = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.0, 5.0, 5.0, 0.0, 0.0]);
        let x_solo = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.0]);
        assert_relative_eq!(joint.running(&x, 0.0), solo.running(&x_solo, 0.0));
    }

    #[test]
    fn terminal_cost_variants() {
        let mut c = uav1_cost();
        let x = DVector::from_column_slice(&[35.0, 20.0, 0.0, 0.0, 32.0, 20.0, 0.0, 0.0]);
        assert_eq!(c.terminal(&x), 0.0);

        c.terminal = TerminalCost::QuadraticGoals {
            kappa: 1.0,
            goals: vec![[35.0, 20.0], [35.0, 20.0]],
        };
        // Center on goal contributes 0, neighbor 3 m away contributes 9.
        assert_relative_eq!(c.terminal(&x), 9.0);
    }

    #[test]
    fn derived_control_weight() {
        let sigma = DMatrix::identity(2, 2);
        let r = derive_control_weight(&sigma, 1.0).unwrap();
        assert_relative_eq!(r, DMatrix::identity(2, 2));

        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.75, 0.65]));
        let r = derive_control_weight(&sigma, 1.0).unwrap();
        assert_relative_eq!(r[(0, 0)], 1.0 / 0.5625, max_relative = 1e-12);
        assert_relative_eq!(r[(1, 1)], 1.0 / 0.4225, max_relative = 1e-12);

        // Identity R with unequal noise violates the consistency condition.
        let mismatch = control_weight_mismatch(&DMatrix::identity(2, 2), &r);
        assert!(mismatch > 1e-6);
    }

    #[test]
    fn derived_weight_is_symmetric_pd() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.5]);
        let r = derive_control_weight(&sigma, 2.0).unwrap();
        assert!((r.clone() - r.transpose()).amax() < 1e-12);
        assert!(r.clone().cholesky().is_some());
    }

    #[test]
    fn singular_noise_is_an_error() {
        let sigma = DMatrix::zeros(2, 2);
        assert!(derive_control_weight(&sigma, 1.0).is_err());
    }

    #[test]
    fn clamp_holds_on_random_states() {
        use rand::{Rng, SeedableRng};
        let c = uav1_cost();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = DVector::from_fn(8, |_, _| rng.random_range(-50.0..50.0));
            assert!(c.running(&x, 0.0) >= 0.0);
        }
    }
}
