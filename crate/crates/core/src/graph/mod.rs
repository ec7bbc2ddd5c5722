//! Factor graph over states `x = [pose, velocity, bias]`.
//!
//! Every state has a 15-dim tangent `[δω, δρ, δv, δba, δbg]`; poses retract
//! on the right through the SE(3) exponential, velocity and bias additively.

pub mod imu;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{boxminus_jacobians, Pose3, Tangent6};

pub use imu::{
    gravity_vector, imu_residual, imu_residual_and_jacobians, preintegrate, ImuBias, ImuNoise,
    ImuSample, PreintegratedImu, Vector15, GRAVITY,
};

pub const STATE_DIM: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct State {
    pub pose: Pose3,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

impl State {
    pub fn new(pose: Pose3, velocity: Vector3<f64>, bias: ImuBias) -> Self {
        State { pose, velocity, bias }
    }

    pub fn at_rest(pose: Pose3) -> Self {
        State::new(pose, Vector3::zeros(), ImuBias::zero())
    }

    pub fn retract(&self, delta: &[f64]) -> State {
        debug_assert_eq!(delta.len(), STATE_DIM);
        let xi = Tangent6::new(
            Vector3::new(delta[0], delta[1], delta[2]),
            Vector3::new(delta[3], delta[4], delta[5]),
        );
        State {
            pose: self.pose.boxplus(&xi),
            velocity: self.velocity + Vector3::new(delta[6], delta[7], delta[8]),
            bias: ImuBias::new(
                self.bias.accel + Vector3::new(delta[9], delta[10], delta[11]),
                self.bias.gyro + Vector3::new(delta[12], delta[13], delta[14]),
            ),
        }
    }

    pub fn is_finite(&self) -> bool {
        let [w, x, y, z] = self.pose.rotation.wxyz();
        [w, x, y, z].iter().all(|v| v.is_finite())
            && self.pose.translation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.bias.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Gaussian noise model stored with its Cholesky factor `Σ = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    chol_l: DMatrix<f64>,
}

impl NoiseModel {
    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        if !cov.is_square() || cov.nrows() == 0 {
            return Err(Error::NotPositiveDefinite("covariance must be square and non-empty".into()));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
        Ok(NoiseModel { chol_l: chol.l(), covariance: cov })
    }

    pub fn from_sigmas(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::NotPositiveDefinite(format!("sigmas must be positive: {sigmas:?}")));
        }
        let v = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::from_covariance(DMatrix::from_diagonal(&v))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `L⁻¹ r`, so that `‖whiten(r)‖² = rᵀ Σ⁻¹ r`.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol_l
            .solve_lower_triangular(r)
            .expect("Cholesky factor has a non-zero diagonal")
    }

    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol_l
            .solve_lower_triangular(m)
            .expect("Cholesky factor has a non-zero diagonal")
    }

    pub fn mahalanobis_sq(&self, r: &DVector<f64>) -> f64 {
        self.whiten(r).norm_squared()
    }

    pub fn sigma_diagonal(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Prior,
    Gpr,
    Wheel,
    Imu,
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Prior => "prior",
            FactorKind::Gpr => "gpr",
            FactorKind::Wheel => "wheel",
            FactorKind::Imu => "imu",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Factor {
    /// Anchors pose, velocity and bias of one state.
    Prior { var: usize, value: State, noise: NoiseModel },
    /// `boxminus(s_to⁻¹ s_from, z)`; `from` is the older state.
    Relative {
        kind: FactorKind,
        from: usize,
        to: usize,
        measurement: Pose3,
        noise: NoiseModel,
    },
    Imu {
        from: usize,
        to: usize,
        pim: Box<PreintegratedImu>,
        gravity: Vector3<f64>,
        noise: NoiseModel,
    },
}

/// Per-variable Jacobian block of a factor.
pub type JacobianBlock = (usize, DMatrix<f64>);

impl Factor {
    pub fn prior(var: usize, value: State, sigmas: &[f64; STATE_DIM]) -> Result<Self> {
        Ok(Factor::Prior { var, value, noise: NoiseModel::from_sigmas(sigmas)? })
    }

    pub fn gpr(from: usize, to: usize, measurement: Pose3, noise: NoiseModel) -> Self {
        Factor::Relative { kind: FactorKind::Gpr, from, to, measurement, noise }
    }

    pub fn wheel(from: usize, to: usize, measurement: Pose3, noise: NoiseModel) -> Self {
        Factor::Relative { kind: FactorKind::Wheel, from, to, measurement, noise }
    }

    pub fn imu(from: usize, to: usize, pim: PreintegratedImu, imu_noise: &ImuNoise) -> Result<Self> {
        let cov = pim.residual_covariance(imu_noise);
        let noise = NoiseModel::from_covariance(DMatrix::from_iterator(15, 15, cov.iter().copied()))?;
        Ok(Factor::Imu { from, to, pim: Box::new(pim), gravity: imu::gravity_vector(), noise })
    }

    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Prior { .. } => FactorKind::Prior,
            Factor::Relative { kind, .. } => *kind,
            Factor::Imu { .. } => FactorKind::Imu,
        }
    }

    pub fn keys(&self) -> Vec<usize> {
        match self {
            Factor::Prior { var, .. } => vec![*var],
            Factor::Relative { from, to, .. } | Factor::Imu { from, to, .. } => vec![*from, *to],
        }
    }

    pub fn noise(&self) -> &NoiseModel {
        match self {
            Factor::Prior { noise, .. } | Factor::Relative { noise, .. } | Factor::Imu { noise, .. } => noise,
        }
    }

    pub fn dim(&self) -> usize {
        self.noise().dim()
    }

    /// Unwhitened residual.
    pub fn residual(&self, values: &[State]) -> DVector<f64> {
        self.evaluate(values, false).0
    }

    /// Unwhitened residual and Jacobian blocks (each `dim × 15`).
    pub fn linearize(&self, values: &[State]) -> (DVector<f64>, Vec<JacobianBlock>) {
        self.evaluate(values, true)
    }

    /// Whitened residual and whitened Jacobian blocks.
    pub fn linearize_whitened(&self, values: &[State]) -> (DVector<f64>, Vec<JacobianBlock>) {
        let (r, blocks) = self.linearize(values);
        let noise = self.noise();
        (
            noise.whiten(&r),
            blocks.into_iter().map(|(k, j)| (k, noise.whiten_matrix(&j))).collect(),
        )
    }

    /// `‖r‖²_Σ`.
    pub fn cost(&self, values: &[State]) -> f64 {
        self.noise().mahalanobis_sq(&self.residual(values))
    }

    fn evaluate(&self, values: &[State], want_jac: bool) -> (DVector<f64>, Vec<JacobianBlock>) {
        match self {
            Factor::Prior { var, value, .. } => {
                let x = &values[*var];
                let (rp, jp, _) = boxminus_jacobians(&x.pose, &value.pose);
                let mut r = DVector::zeros(STATE_DIM);
                r.rows_mut(0, 6).copy_from(rp.as_vector());
                r.rows_mut(6, 3).copy_from(&(x.velocity - value.velocity));
                r.rows_mut(9, 6).copy_from(&(x.bias.to_vector() - value.bias.to_vector()));
                let mut blocks = Vec::new();
                if want_jac {
                    let mut j = DMatrix::identity(STATE_DIM, STATE_DIM);
                    j.view_mut((0, 0), (6, 6)).copy_from(&jp);
                    blocks.push((*var, j));
                }
                (r, blocks)
            }
            Factor::Relative { from, to, measurement, .. } => {
                let (r, jf, jt) = relative_residual_jacobians(&values[*from].pose, &values[*to].pose, measurement);
                let mut blocks = Vec::new();
                if want_jac {
                    blocks.push((*from, pose_block(&jf)));
                    blocks.push((*to, pose_block(&jt)));
                }
                (DVector::from_column_slice(r.as_vector().as_slice()), blocks)
            }
            Factor::Imu { from, to, pim, gravity, .. } => {
                let (r, ji, jj) = imu_residual_and_jacobians(&values[*from], &values[*to], pim, gravity);
                let mut blocks = Vec::new();
                if want_jac {
                    blocks.push((*from, DMatrix::from_iterator(15, 15, ji.iter().copied())));
                    blocks.push((*to, DMatrix::from_iterator(15, 15, jj.iter().copied())));
                }
                (DVector::from_column_slice(r.as_slice()), blocks)
            }
        }
    }
}

fn pose_block(j: &Matrix6<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(6, STATE_DIM);
    m.view_mut((0, 0), (6, 6)).copy_from(j);
    m
}

/// Residual `boxminus(s_to⁻¹ s_from, z)` of the GPR and wheel factors, with
/// Jacobians with respect to `s_from` and `s_to`.
pub fn relative_residual_jacobians(
    from: &Pose3,
    to: &Pose3,
    measurement: &Pose3,
) -> (Tangent6, Matrix6<f64>, Matrix6<f64>) {
    let rel = to.between(from);
    let (r, j_rel, _) = boxminus_jacobians(&rel, measurement);
    let j_from = j_rel;
    let j_to = -j_rel * rel.inverse().adjoint();
    (r, j_from, j_to)
}

/// GPR residual (`from` is the older anchor `s_{t-k}`).
pub fn gpr_residual(from: &State, to: &State, measurement: &Pose3) -> Tangent6 {
    relative_residual_jacobians(&from.pose, &to.pose, measurement).0
}

/// Wheel-odometry residual between consecutive states.
pub fn wheel_residual(prev: &State, next: &State, measurement: &Pose3) -> Tangent6 {
    relative_residual_jacobians(&prev.pose, &next.pose, measurement).0
}

/// Measurement `s_t⁻¹ s_{t-1}` for a planar move: the robot drives `distance`
/// forward while turning by `yaw`, the chord bisecting the heading change.
pub fn planar_odometry_measurement(distance: f64, yaw: f64) -> Pose3 {
    let half = 0.5 * yaw;
    Pose3::planar(distance * half.cos(), distance * half.sin(), yaw).inverse()
}

#[derive(Clone, Debug, Default)]
pub struct FactorGraph {
    values: Vec<State>,
    factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a variable and returns its index.
    pub fn add_variable(&mut self, initial: State) -> usize {
        self.values.push(initial);
        self.values.len() - 1
    }

    /// Inserts a variable at an explicit index, which must be the next free one.
    pub fn insert_variable(&mut self, index: usize, initial: State) -> Result<()> {
        if index < self.values.len() {
            return Err(Error::DuplicateVariable(index));
        }
        if index > self.values.len() {
            return Err(Error::UnknownVariable(index));
        }
        self.values.push(initial);
        Ok(())
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize> {
        for k in factor.keys() {
            if k >= self.values.len() {
                return Err(Error::UnknownVariable(k));
            }
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn num_variables(&self) -> usize {
        self.values.len()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn current_estimate(&self) -> &[State] {
        &self.values
    }

    pub fn set_estimate(&mut self, values: Vec<State>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::LengthMismatch { expected: self.values.len(), got: values.len() });
        }
        self.values = values;
        Ok(())
    }

    /// `Σ ‖r_i‖²_Σi` at the given values.
    pub fn cost(&self, values: &[State]) -> f64 {
        self.factors.iter().map(|f| f.cost(values)).sum()
    }

    pub fn residual_dim(&self) -> usize {
        self.factors.iter().map(Factor::dim).sum()
    }

    /// One factor per line: kind, indices, measurement, Σ diagonal.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for f in &self.factors {
            let keys: Vec<String> = f.keys().iter().map(|k| k.to_string()).collect();
            let meas = match f {
                Factor::Prior { value, .. } => pose_text(&value.pose),
                Factor::Relative { measurement, .. } => pose_text(measurement),
                Factor::Imu { pim, .. } => {
                    let [w, x, y, z] = pim.delta_rot.wxyz();
                    format!(
                        "dt={} dR=[{w} {x} {y} {z}] dv=[{} {} {}] dp=[{} {} {}]",
                        pim.dt,
                        pim.delta_vel.x,
                        pim.delta_vel.y,
                        pim.delta_vel.z,
                        pim.delta_pos.x,
                        pim.delta_pos.y,
                        pim.delta_pos.z
                    )
                }
            };
            let sig: Vec<String> = f.noise().sigma_diagonal().iter().map(|s| format!("{s:e}")).collect();
            let _ = writeln!(out, "{} {} {} sigma=[{}]", f.kind().name(), keys.join(","), meas, sig.join(" "));
        }
        out
    }
}

fn pose_text(p: &Pose3) -> String {
    let [w, x, y, z] = p.rotation.wxyz();
    let t = p.translation;
    format!("t=[{} {} {}] q=[{w} {x} {y} {z}]", t.x, t.y, t.z)
}

/// Sigmas for the relative factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Along-track sigma of a GPR loop closure, m.
    pub gpr_x: f64,
    /// Sigma on the five unobserved GPR directions (m and rad).
    pub gpr_weak: f64,
    /// Wheel distance sigma as a fraction of distance travelled.
    pub wheel_fraction: f64,
    /// Floor on the wheel translation sigma, m.
    pub wheel_floor: f64,
    pub wheel_yaw: f64,
    /// Roll and pitch sigma of the wheel factor (planar motion), rad.
    pub wheel_tilt: f64,
    /// Vertical sigma of the wheel factor, m.
    pub wheel_z: f64,
    pub prior_position: f64,
    pub prior_rotation: f64,
    pub prior_velocity: f64,
    pub prior_accel_bias: f64,
    pub prior_gyro_bias: f64,
    pub imu: ImuNoise,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gpr_x: 0.05,
            gpr_weak: 10.0,
            wheel_fraction: 0.01,
            wheel_floor: 1e-3,
            wheel_yaw: 0.01,
            wheel_tilt: 0.01,
            wheel_z: 0.01,
            prior_position: 1e-3,
            prior_rotation: 1e-3,
            prior_velocity: 1e-2,
            prior_accel_bias: 0.1,
            prior_gyro_bias: 1e-2,
            imu: ImuNoise::default(),
        }
    }
}

impl NoiseConfig {
    /// Noise of a GPR factor: tight along x, weak elsewhere.
    pub fn gpr_noise(&self) -> Result<NoiseModel> {
        let w = self.gpr_weak;
        NoiseModel::from_sigmas(&[w, w, w, self.gpr_x, w, w])
    }

    pub fn wheel_noise(&self, distance: f64) -> Result<NoiseModel> {
        let s = self.wheel_fraction * distance.abs() + self.wheel_floor;
        NoiseModel::from_sigmas(&[self.wheel_tilt, self.wheel_tilt, self.wheel_yaw, s, s, self.wheel_z])
    }

    pub fn prior_sigmas(&self) -> [f64; STATE_DIM] {
        let (p, r, v, a, g) = (
            self.prior_position,
            self.prior_rotation,
            self.prior_velocity,
            self.prior_accel_bias,
            self.prior_gyro_bias,
        );
        [r, r, r, p, p, p, v, v, v, a, a, a, g, g, g]
    }
}

/// Dense `dim × 15` helper used by tests and the solver for fixed-size math.
pub fn block_to_smatrix<const R: usize>(m: &DMatrix<f64>) -> SMatrix<f64, R, STATE_DIM> {
    SMatrix::<f64, R, STATE_DIM>::from_iterator(m.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rot3;

    #[test]
    fn gpr_sign_convention() {
        let a = State::at_rest(Pose3::identity());
        let b = State::at_rest(Pose3::from_translation(1.0, 0.0, 0.0));
        let z = Pose3::from_translation(-1.0, 0.0, 0.0);
        assert!(gpr_residual(&a, &b, &z).norm() < 1e-15);
        let z2 = Pose3::from_translation(-0.9, 0.0, 0.0);
        let r = gpr_residual(&a, &b, &z2);
        assert!((r.translation().x + 0.1).abs() < 1e-12);
    }

    #[test]
    fn wheel_forward_metre_is_consistent() {
        let a = State::at_rest(Pose3::planar(2.0, 1.0, 0.3));
        let b = State::at_rest(a.pose.compose(&Pose3::from_translation(1.0, 0.0, 0.0)));
        let z = planar_odometry_measurement(1.0, 0.0);
        assert!(wheel_residual(&a, &b, &z).norm() < 1e-12);
    }

    #[test]
    fn planar_odometry_with_turn() {
        let z = planar_odometry_measurement(2.0, 0.4);
        let fwd = z.inverse();
        assert!((fwd.yaw() - 0.4).abs() < 1e-12);
        assert!((fwd.translation.norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn graph_bookkeeping() {
        let mut g = FactorGraph::new();
        assert_eq!(g.cost(g.current_estimate()), 0.0);
        let x = State::at_rest(Pose3::planar(1.0, 2.0, 0.5));
        let i = g.add_variable(x);
        assert!(matches!(g.insert_variable(0, x), Err(Error::DuplicateVariable(0))));
        g.add_factor(Factor::prior(i, x, &NoiseConfig::default().prior_sigmas()).unwrap()).unwrap();
        assert!(g.cost(g.current_estimate()) < 1e-20);
        let bad = Factor::wheel(0, 3, Pose3::identity(), NoiseConfig::default().wheel_noise(1.0).unwrap());
        assert!(matches!(g.add_factor(bad), Err(Error::UnknownVariable(3))));
        assert_eq!(g.dump().lines().count(), 1);
        assert!(g.dump().starts_with("prior 0 "));
    }

    #[test]
    fn noise_model_rejects_bad_covariances() {
        assert!(NoiseModel::from_sigmas(&[1.0, 0.0]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(NoiseModel::from_covariance(asym).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::from_covariance(indef).is_err());
        let n = NoiseModel::from_sigmas(&[2.0, 0.5]).unwrap();
        let r = DVector::from_vec(vec![2.0, 0.5]);
        assert!((n.mahalanobis_sq(&r) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn retract_zero_is_identity() {
        let x = State::new(
            Pose3::new(Rot3::from_euler(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)),
            Vector3::new(0.1, 0.2, 0.3),
            ImuBias::new(Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.0, 0.001, 0.0)),
        );
        assert_eq!(x.retract(&[0.0; 15]).pose.translation, x.pose.translation);
        assert_eq!(x.retract(&[0.0; 15]).bias, x.bias);
    }
}
