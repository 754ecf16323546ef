//! Single-agent controlled SDEs and their stacked subsystem form.
//!
//! Every agent in a scenario shares one [`AgentModel`]. The model owns the
//! passive drift, the directly-actuated rows of the control matrix (the
//! non-actuated rows are identically zero by construction), and two noise
//! scales: the model noise executed by the true world and the inflated
//! sampling noise used for exploration rollouts.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::Subsystem;

/// Which noise scale an integration step draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Noise of the executed dynamics.
    Model,
    /// Inflated exploration noise used when sampling rollouts.
    Sampling,
}

type DriftFn = dyn Fn(&[f64], f64) -> DVector<f64> + Send + Sync;
type ControlMatrixFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

pub struct AgentModel {
    state_dim: usize,
    input_dim: usize,
    nonact_dim: usize,
    act_dim: usize,
    drift: Box<DriftFn>,
    /// Directly-actuated rows of the control matrix, `act_dim x input_dim`.
    control_matrix_actuated: Box<ControlMatrixFn>,
    /// True when the control matrix does not depend on the state, allowing
    /// per-cycle caching of the step weight matrices.
    constant_control_matrix: bool,
    noise_scale: DMatrix<f64>,
    sampling_noise_scale: DMatrix<f64>,
}

impl std::fmt::Debug for AgentModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("nonact_dim", &self.nonact_dim)
            .field("act_dim", &self.act_dim)
            .finish()
    }
}

impl AgentModel {
    /// Generic constructor. `control_matrix_actuated` supplies only the
    /// bottom `act_dim` rows of B; the top `nonact_dim` rows are zero.
    pub fn new(
        nonact_dim: usize,
        act_dim: usize,
        input_dim: usize,
        drift: Box<DriftFn>,
        control_matrix_actuated: Box<ControlMatrixFn>,
        constant_control_matrix: bool,
        noise_scale: DMatrix<f64>,
        sampling_noise_scale: DMatrix<f64>,
    ) -> Result<Self> {
        for (name, m) in [("noise_scale", &noise_scale), ("sampling_noise_scale", &sampling_noise_scale)] {
            if m.nrows() != input_dim || m.ncols() != input_dim {
                return Err(Error::Dimension(format!(
                    "{name} must be {input_dim}x{input_dim}"
                )));
            }
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 {
                return Err(Error::Dimension(format!("{name} must be symmetric")));
            }
        }
        Ok(Self {
            state_dim: nonact_dim + act_dim,
            input_dim,
            nonact_dim,
            act_dim,
            drift,
            control_matrix_actuated,
            constant_control_matrix,
            noise_scale,
            sampling_noise_scale,
        })
    }

    /// Planar unicycle with state (x, y, v, phi) and inputs
    /// (acceleration, turn rate). Positions are non-actuated; velocity and
    /// heading carry the controls and noise directly.
    pub fn unicycle(sigma: f64, nu: f64, sigma_s: f64, nu_s: f64) -> Self {
        let drift = |x: &[f64], _t: f64| {
            DVector::from_column_slice(&[x[2] * x[3].cos(), x[2] * x[3].sin(), 0.0, 0.0])
        };
        Self::new(
            2,
            2,
            2,
            Box::new(drift),
            Box::new(|_x: &[f64]| DMatrix::identity(2, 2)),
            true,
            DMatrix::from_diagonal(&DVector::from_column_slice(&[sigma, nu])),
            DMatrix::from_diagonal(&DVector::from_column_slice(&[sigma_s, nu_s])),
        )
        .expect("unicycle dimensions are consistent")
    }

    /// Scalar single integrator dx = u dt + sigma dw. The whole state is
    /// directly actuated; used by the linear-quadratic validation oracles.
    pub fn integrator_1d(sigma: f64, sigma_s: f64) -> Self {
        Self::new(
            0,
            1,
            1,
            Box::new(|_x: &[f64], _t: f64| DVector::zeros(1)),
            Box::new(|_x: &[f64]| DMatrix::identity(1, 1)),
            true,
            DMatrix::from_element(1, 1, sigma),
            DMatrix::from_element(1, 1, sigma_s),
        )
        .expect("1-d integrator dimensions are consistent")
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn nonact_dim(&self) -> usize {
        self.nonact_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn constant_control_matrix(&self) -> bool {
        self.constant_control_matrix
    }

    pub fn noise_scale(&self, kind: NoiseKind) -> &DMatrix<f64> {
        match kind {
            NoiseKind::Model => &self.noise_scale,
            NoiseKind::Sampling => &self.sampling_noise_scale,
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> DVector<f64> {
        (self.drift)(x, t)
    }

    pub fn control_matrix_actuated(&self, x: &[f64]) -> DMatrix<f64> {
        (self.control_matrix_actuated)(x)
    }

    /// Full `state_dim x input_dim` control matrix with explicit zero rows.
    pub fn control_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.state_dim, self.input_dim);
        b.view_mut((self.nonact_dim, 0), (self.act_dim, self.input_dim))
            .copy_from(&self.control_matrix_actuated(x));
        b
    }
}

/// Joint state of a subsystem: per-member state blocks stacked in canonical
/// member order.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub subsystem: Subsystem,
    pub values: DVector<f64>,
}

impl JointState {
    pub fn new(subsystem: Subsystem, values: DVector<f64>, model: &AgentModel) -> Result<Self> {
        if values.len() != subsystem.len() * model.state_dim() {
            return Err(Error::Dimension(format!(
                "joint state length {} != {} members x state dim {}",
                values.len(),
                subsystem.len(),
                model.state_dim()
            )));
        }
        Ok(Self { subsystem, values })
    }

    /// State block of the member at canonical position `pos`.
    pub fn member_block(&self, pos: usize, state_dim: usize) -> &[f64] {
        &self.values.as_slice()[pos * state_dim..(pos + 1) * state_dim]
    }
}

fn member_count(model: &AgentModel, x: &DVector<f64>) -> Result<usize> {
    let m = model.state_dim();
    if x.len() % m != 0 || x.is_empty() {
        return Err(Error::Dimension(format!(
            "joint vector length {} is not a positive multiple of state dim {m}",
            x.len()
        )));
    }
    Ok(x.len() / m)
}

/// Stacked passive drift of the subsystem, length `M * n`.
pub fn joint_drift(model: &AgentModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let n = member_count(model, x)?;
    let m = model.state_dim();
    let mut out = DVector::zeros(m * n);
    for a in 0..n {
        let block = model.drift(&x.as_slice()[a * m..(a + 1) * m], t);
        out.rows_mut(a * m, m).copy_from(&block);
    }
    Ok(out)
}

/// Directly-actuated rows of the stacked drift, length `D * n`.
pub fn joint_drift_actuated(model: &AgentModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let n = member_count(model, x)?;
    let (m, u, d) = (model.state_dim(), model.nonact_dim(), model.act_dim());
    let mut out = DVector::zeros(d * n);
    for a in 0..n {
        let block = model.drift(&x.as_slice()[a * m..(a + 1) * m], t);
        out.rows_mut(a * d, d).copy_from(&block.rows(u, d));
    }
    Ok(out)
}

/// Block-diagonal joint control matrix, `M*n x P*n`.
pub fn joint_control_matrix(model: &AgentModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = member_count(model, x)?;
    let (m, p, u, d) = (
        model.state_dim(),
        model.input_dim(),
        model.nonact_dim(),
        model.act_dim(),
    );
    let mut out = DMatrix::zeros(m * n, p * n);
    for a in 0..n {
        let bd = model.control_matrix_actuated(&x.as_slice()[a * m..(a + 1) * m]);
        out.view_mut((a * m + u, a * p), (d, p)).copy_from(&bd);
    }
    Ok(out)
}

/// Directly-actuated rows of the joint control matrix, `D*n x P*n`.
pub fn joint_control_matrix_actuated(model: &AgentModel, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = member_count(model, x)?;
    let (m, p, d) = (model.state_dim(), model.input_dim(), model.act_dim());
    let mut out = DMatrix::zeros(d * n, p * n);
    for a in 0..n {
        let bd = model.control_matrix_actuated(&x.as_slice()[a * m..(a + 1) * m]);
        out.view_mut((a * d, a * p), (d, p)).copy_from(&bd);
    }
    Ok(out)
}

/// Block-diagonal joint noise scale, `P*n x P*n`.
pub fn joint_noise_scale(model: &AgentModel, n: usize, kind: NoiseKind) -> DMatrix<f64> {
    let p = model.input_dim();
    let s = model.noise_scale(kind);
    let mut out = DMatrix::zeros(p * n, p * n);
    for a in 0..n {
        out.view_mut((a * p, a * p), (p, p)).copy_from(s);
    }
    out
}

/// One Euler-Maruyama step of the joint dynamics:
/// `x' = x + (f + B u) eps + B sigma sqrt(eps) xi`.
///
/// `u` is the joint control (length `P*n`); `None` means zero control.
/// Noise enters only the directly-actuated rows since the non-actuated rows
/// of B are zero. Deterministic given the RNG stream.
pub fn euler_maruyama_step<R: Rng + ?Sized>(
    model: &AgentModel,
    x: &DVector<f64>,
    u: Option<&DVector<f64>>,
    kind: NoiseKind,
    eps: f64,
    t: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = member_count(model, x)?;
    let (m, p, nu, d) = (
        model.state_dim(),
        model.input_dim(),
        model.nonact_dim(),
        model.act_dim(),
    );
    if let Some(u) = u {
        if u.len() != p * n {
            return Err(Error::Dimension(format!(
                "joint control length {} != {}",
                u.len(),
                p * n
            )));
        }
    }
    if eps <= 0.0 {
        return Err(Error::Dimension("step length must be positive".into()));
    }
    let sigma = model.noise_scale(kind);
    let sqrt_eps = eps.sqrt();
    let mut out = DVector::zeros(m * n);
    for a in 0..n {
        let xa = &x.as_slice()[a * m..(a + 1) * m];
        let fa = model.drift(xa, t);
        let mut next = DVector::from_column_slice(xa) + fa * eps;
        let mut channel = DVector::zeros(p);
        if let Some(u) = u {
            channel += u.rows(a * p, p) * eps;
        }
        let xi = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        channel += sigma * xi * sqrt_eps;
        let bd = model.control_matrix_actuated(xa);
        next.rows_mut(nu, d).axpy(1.0, &(bd * channel), 1.0);
        out.rows_mut(a * m, m).copy_from(&next);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unicycle() -> AgentModel {
        AgentModel::unicycle(0.1, 0.05, 0.75, 0.65)
    }

    #[test]
    fn unicycle_drift_blocks() {
        let m = unicycle();
        let x = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let f = joint_drift(&m, &x, 0.0).unwrap();
        assert_relative_eq!(f, DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]));

        let x = DVector::from_column_slice(&[0.0, 0.0, 2.0, std::f64::consts::FRAC_PI_2]);
        let f = joint_drift(&m, &x, 0.0).unwrap();
        assert!(f[0].abs() < 1e-15);
        assert_relative_eq!(f[1], 2.0);
    }

    #[test]
    fn joint_drift_at_rest_is_zero() {
        let m = unicycle();
        let x = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.3, 4.0, 5.0, 0.0, 1.1]);
        let f = joint_drift(&m, &x, 0.0).unwrap();
        assert!(f.amax() < 1e-15);
    }

    #[test]
    fn control_matrix_shapes() {
        let m = unicycle();
        let x1 = DVector::from_column_slice(&[0.0; 4]);
        let b = joint_control_matrix(&m, &x1).unwrap();
        assert_eq!(b.shape(), (4, 2));
        assert_relative_eq!(b.view((2, 0), (2, 2)).clone_owned(), DMatrix::identity(2, 2));
        assert!(b.view((0, 0), (2, 2)).amax() == 0.0);

        let x2 = DVector::from_column_slice(&[0.0; 8]);
        let b2 = joint_control_matrix(&m, &x2).unwrap();
        assert_eq!(b2.shape(), (8, 4));
        let bd = joint_control_matrix_actuated(&m, &x2).unwrap();
        assert_relative_eq!(bd, DMatrix::identity(4, 4));
    }

    #[test]
    fn zero_noise_zero_drift_state_unchanged() {
        let m = AgentModel::unicycle(0.0, 0.0, 0.0, 0.0);
        let x = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x2 = euler_maruyama_step(&m, &x, None, NoiseKind::Model, 0.5, 0.0, &mut rng).unwrap();
        assert_relative_eq!(x2, x);
    }

    #[test]
    fn zero_noise_matches_euler() {
        let m = AgentModel::unicycle(0.0, 0.0, 0.0, 0.0);
        let x = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x2 = euler_maruyama_step(&m, &x, None, NoiseKind::Model, 0.5, 0.0, &mut rng).unwrap();
        assert_relative_eq!(x2, DVector::from_column_slice(&[0.5, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn single_member_stacking_is_identity() {
        let m = unicycle();
        let x = DVector::from_column_slice(&[3.0, -1.0, 0.7, 0.2]);
        let f_joint = joint_drift(&m, &x, 1.0).unwrap();
        let f_single = m.drift(x.as_slice(), 1.0);
        assert_relative_eq!(f_joint, f_single);
        let b_joint = joint_control_matrix(&m, &x).unwrap();
        assert_relative_eq!(b_joint, m.control_matrix(x.as_slice()));
    }

    #[test]
    fn actuated_increment_covariance_matches_eps_h() {
        // Sample covariance of the actuated increments over 1e5 draws must
        // match eps * H = eps * B_d sigma sigma^T B_d^T within 3%.
        let m = unicycle();
        let x = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.3]);
        let eps = 0.01;
        let n_draws = 100_000;
        let f_d = joint_drift_actuated(&m, &x, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut sums = DMatrix::zeros(2, 2);
        for _ in 0..n_draws {
            let x2 =
                euler_maruyama_step(&m, &x, None, NoiseKind::Sampling, eps, 0.0, &mut rng).unwrap();
            let dx = DVector::from_column_slice(&[x2[2] - x[2], x2[3] - x[3]]) - &f_d * eps;
            sums += &dx * dx.transpose();
        }
        let cov = sums / n_draws as f64;
        let expected = eps * DMatrix::from_diagonal(&DVector::from_column_slice(&[
            0.75 * 0.75,
            0.65 * 0.65,
        ]));
        for i in 0..2 {
            assert_relative_eq!(cov[(i, i)], expected[(i, i)], max_relative = 0.03);
            assert!(cov[(i, 1 - i)].abs() < 0.03 * expected[(i, i)]);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = unicycle();
        let x = DVector::from_column_slice(&[0.0; 5]);
        assert!(joint_drift(&m, &x, 0.0).is_err());
    }
}
