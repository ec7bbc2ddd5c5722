//! On-manifold IMU preintegration and the preintegrated IMU residual.
//!
//! Each interval between consecutive samples uses the average of the two
//! endpoint measurements (midpoint rule), held constant over the interval.
//! Within an interval the rotation, velocity and position increments are
//! integrated in closed form, so constant measurements give exact deltas.
//! Covariance and first-order bias Jacobians are propagated per interval.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{hat, so3_left_jacobian, so3_right_jacobian, so3_right_jacobian_inv, Rot3};

use super::State;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.81;

/// World-frame gravity vector (−z up).
pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force, body frame, m/s².
    pub accel: Vector3<f64>,
    /// Angular rate, body frame, rad/s.
    pub gyro: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        ImuBias { accel, gyro }
    }

    pub fn to_vector(&self) -> SVector<f64, 6> {
        SVector::<f64, 6>::new(
            self.accel.x, self.accel.y, self.accel.z, self.gyro.x, self.gyro.y, self.gyro.z,
        )
    }

    pub fn from_vector(v: &SVector<f64, 6>) -> Self {
        ImuBias {
            accel: Vector3::new(v[0], v[1], v[2]),
            gyro: Vector3::new(v[3], v[4], v[5]),
        }
    }
}

/// Continuous-time noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    /// m/s²/√Hz
    pub accel_density: f64,
    /// rad/s/√Hz
    pub gyro_density: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        ImuNoise {
            accel_density: 2e-3,
            gyro_density: 2e-4,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-6,
        }
    }
}

/// `∫₀¹ (1 − u) exp(u φ) du`, the double integral of the rotation over a
/// unit interval.
fn so3_double_integral(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (b, c) = if theta < 1e-4 {
        (1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0)
    } else {
        ((theta - theta.sin()) / (t2 * theta), (0.5 * t2 - 1.0 + theta.cos()) / (t2 * t2))
    };
    let w = hat(phi);
    Matrix3::identity() * 0.5 + w * b + w * w * c
}

/// Compound relative-motion measurement between two states.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub delta_rot: Rot3,
    pub delta_vel: Vector3<f64>,
    pub delta_pos: Vector3<f64>,
    /// Integration time, s.
    pub dt: f64,
    /// Covariance of `[δφ, δv, δp]`.
    pub covariance: Matrix9,
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
    /// Bias the measurements were integrated with.
    pub bias_hat: ImuBias,
}

impl PreintegratedImu {
    pub fn identity(bias_hat: ImuBias) -> Self {
        PreintegratedImu {
            delta_rot: Rot3::identity(),
            delta_vel: Vector3::zeros(),
            delta_pos: Vector3::zeros(),
            dt: 0.0,
            covariance: Matrix9::zeros(),
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
            bias_hat,
        }
    }

    /// Integrates one interval of length `dt` with constant raw measurements.
    pub fn integrate(&mut self, accel: &Vector3<f64>, gyro: &Vector3<f64>, dt: f64, noise: &ImuNoise) {
        let a = accel - self.bias_hat.accel;
        let w = gyro - self.bias_hat.gyro;
        let r = self.delta_rot.matrix();
        let ahat = hat(&a);
        let phi = w * dt;
        let inc = Rot3::exp(&phi);
        let jr = so3_right_jacobian(&phi);
        let dt2 = dt * dt;

        // Covariance: [δφ, δv, δp]
        let mut f = Matrix9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&inc.matrix().transpose());
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r * ahat * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r * ahat * (0.5 * dt2)));
        f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(jr * dt));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r * dt));
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r * (0.5 * dt2)));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        if dt > 0.0 {
            let qa = noise.accel_density * noise.accel_density / dt;
            let qg = noise.gyro_density * noise.gyro_density / dt;
            for i in 0..3 {
                q[(i, i)] = qa;
                q[(i + 3, i + 3)] = qg;
            }
        }
        self.covariance = f * self.covariance * f.transpose() + g * q * g.transpose();

        // Bias Jacobians, position first since it reads the old velocity terms.
        // The gyro terms keep the first-order dependence of the interval
        // integrals on φ.
        let single = so3_left_jacobian(&phi);
        let double = so3_double_integral(&phi);
        let (va, pa) = (single * a, double * a);
        self.d_pos_d_ba += self.d_vel_d_ba * dt - r * double * dt2;
        self.d_pos_d_bg += self.d_vel_d_bg * dt - r * hat(&pa) * self.d_rot_d_bg * dt2 + r * ahat * (dt2 * dt / 6.0);
        self.d_vel_d_ba -= r * single * dt;
        self.d_vel_d_bg += -r * hat(&va) * self.d_rot_d_bg * dt + r * ahat * (0.5 * dt2);
        self.d_rot_d_bg = inc.matrix().transpose() * self.d_rot_d_bg - jr * dt;

        self.delta_pos += self.delta_vel * dt + r * pa * dt2;
        self.delta_vel += r * va * dt;
        self.delta_rot = self.delta_rot.compose(&inc);
        self.dt += dt;
    }

    /// Preintegrated deltas corrected to first order for a new bias.
    pub fn corrected(&self, bias: &ImuBias) -> (Rot3, Vector3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias_hat.accel;
        let dbg = bias.gyro - self.bias_hat.gyro;
        let rot = self.delta_rot.compose(&Rot3::exp(&(self.d_rot_d_bg * dbg)));
        let vel = self.delta_vel + self.d_vel_d_ba * dba + self.d_vel_d_bg * dbg;
        let pos = self.delta_pos + self.d_pos_d_ba * dba + self.d_pos_d_bg * dbg;
        (rot, vel, pos)
    }

    /// 15×15 residual covariance: preintegration block plus bias random walk.
    pub fn residual_covariance(&self, noise: &ImuNoise) -> Matrix15 {
        let mut cov = Matrix15::zeros();
        cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&self.covariance);
        let sa = noise.accel_bias_walk * noise.accel_bias_walk * self.dt;
        let sg = noise.gyro_bias_walk * noise.gyro_bias_walk * self.dt;
        for i in 0..3 {
            cov[(9 + i, 9 + i)] = sa;
            cov[(12 + i, 12 + i)] = sg;
        }
        // Floor so that very short intervals still have a usable Cholesky factor.
        for i in 0..15 {
            cov[(i, i)] += 1e-12;
        }
        cov
    }
}

/// Preintegrates consecutive samples, from the first sample's timestamp to
/// the last one's.
pub fn preintegrate(samples: &[ImuSample], bias_hat: ImuBias, noise: &ImuNoise) -> Result<PreintegratedImu> {
    let mut pim = PreintegratedImu::identity(bias_hat);
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.t - a.t;
        if !(dt > 0.0) {
            return Err(Error::Stream(format!(
                "IMU timestamps not increasing: {} then {}",
                a.t, b.t
            )));
        }
        let accel = (a.accel + b.accel) * 0.5;
        let gyro = (a.gyro + b.gyro) * 0.5;
        pim.integrate(&accel, &gyro, dt, noise);
    }
    Ok(pim)
}

/// Unwhitened 15-vector `[r_R, r_v, r_p, r_ba, r_bg]`.
pub fn imu_residual(xi: &State, xj: &State, pim: &PreintegratedImu, gravity: &Vector3<f64>) -> Vector15 {
    imu_residual_and_jacobians(xi, xj, pim, gravity).0
}

/// Residual with Jacobians with respect to the 15-dim tangents of both states.
pub fn imu_residual_and_jacobians(
    xi: &State,
    xj: &State,
    pim: &PreintegratedImu,
    gravity: &Vector3<f64>,
) -> (Vector15, Matrix15, Matrix15) {
    let dt = pim.dt;
    let ri = xi.pose.rotation.matrix();
    let rj = xj.pose.rotation.matrix();
    let rit = ri.transpose();
    let (drot, dvel, dpos) = pim.corrected(&xi.bias);

    let err_rot = drot.inverse().compose(&xi.pose.rotation.inverse()).compose(&xj.pose.rotation);
    let r_rot = err_rot.log();
    let dv_world = xj.velocity - xi.velocity - gravity * dt;
    let dp_world = xj.pose.translation
        - xi.pose.translation
        - xi.velocity * dt
        - gravity * (0.5 * dt * dt);
    let r_vel = rit * dv_world - dvel;
    let r_pos = rit * dp_world - dpos;
    let r_bias = xj.bias.to_vector() - xi.bias.to_vector();

    let mut r = Vector15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_vel);
    r.fixed_rows_mut::<3>(6).copy_from(&r_pos);
    r.fixed_rows_mut::<6>(9).copy_from(&r_bias);

    // Tangent layout: [δω, δρ, δv, δba, δbg]
    let jr_inv = so3_right_jacobian_inv(&r_rot);
    let dbg = xi.bias.gyro - pim.bias_hat.gyro;
    let jr_bias = so3_right_jacobian(&(pim.d_rot_d_bg * dbg));
    let mut ji = Matrix15::zeros();
    let mut jj = Matrix15::zeros();

    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * rj.transpose() * ri));
    ji.fixed_view_mut::<3, 3>(0, 12)
        .copy_from(&(-jr_inv * err_rot.matrix().transpose() * jr_bias * pim.d_rot_d_bg));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);

    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&(rit * dv_world)));
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-rit));
    ji.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-pim.d_vel_d_ba));
    ji.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-pim.d_vel_d_bg));
    jj.fixed_view_mut::<3, 3>(3, 6).copy_from(&rit);

    ji.fixed_view_mut::<3, 3>(6, 0).copy_from(&hat(&(rit * dp_world)));
    ji.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-Matrix3::identity()));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-rit * dt));
    ji.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-pim.d_pos_d_ba));
    ji.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-pim.d_pos_d_bg));
    jj.fixed_view_mut::<3, 3>(6, 3).copy_from(&(rit * rj));

    for k in 0..6 {
        ji[(9 + k, 9 + k)] = -1.0;
        jj[(9 + k, 9 + k)] = 1.0;
    }
    (r, ji, jj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(accel: Vector3<f64>, gyro: Vector3<f64>, duration: f64, rate: f64) -> Vec<ImuSample> {
        let n = (duration * rate).round() as usize;
        (0..=n)
            .map(|k| ImuSample { t: k as f64 / rate, accel, gyro })
            .collect()
    }

    #[test]
    fn empty_and_single_sample_are_identity() {
        let noise = ImuNoise::default();
        for s in [vec![], constant(Vector3::x(), Vector3::z(), 0.0, 100.0)] {
            let p = preintegrate(&s, ImuBias::zero(), &noise).unwrap();
            assert_eq!(p.delta_rot, Rot3::identity());
            assert_eq!(p.delta_vel, Vector3::zeros());
            assert_eq!(p.delta_pos, Vector3::zeros());
            assert_eq!(p.dt, 0.0);
        }
    }

    #[test]
    fn constant_yaw_rate() {
        let s = constant(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.1), 1.0, 200.0);
        let p = preintegrate(&s, ImuBias::zero(), &ImuNoise::default()).unwrap();
        let err = p.delta_rot.inverse().compose(&Rot3::rz(0.1)).log().norm();
        assert!(err < 1e-9, "{err}");
        assert!((p.dt - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_acceleration() {
        let s = constant(Vector3::x(), Vector3::zeros(), 2.0, 100.0);
        let p = preintegrate(&s, ImuBias::zero(), &ImuNoise::default()).unwrap();
        assert!((p.delta_vel - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((p.delta_pos - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn non_increasing_timestamps_rejected() {
        let mut s = constant(Vector3::x(), Vector3::zeros(), 0.1, 100.0);
        s[3].t = s[2].t;
        assert!(matches!(
            preintegrate(&s, ImuBias::zero(), &ImuNoise::default()),
            Err(Error::Stream(_))
        ));
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let s = constant(Vector3::new(0.3, -0.1, 9.81), Vector3::new(0.01, 0.02, 0.3), 1.0, 100.0);
        let p = preintegrate(&s, ImuBias::zero(), &ImuNoise::default()).unwrap();
        assert!((p.covariance - p.covariance.transpose()).norm() < 1e-15);
        let eig = p.covariance.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-18));
    }

    #[test]
    fn bias_correction_matches_reintegration() {
        let s: Vec<ImuSample> = (0..=100)
            .map(|k| {
                let t = k as f64 * 0.01;
                ImuSample {
                    t,
                    accel: Vector3::new(0.5 * t.sin(), 0.2, 9.81),
                    gyro: Vector3::new(0.01, -0.02, 0.3 * t.cos()),
                }
            })
            .collect();
        let noise = ImuNoise::default();
        let base = preintegrate(&s, ImuBias::zero(), &noise).unwrap();
        let db = ImuBias::new(Vector3::new(1e-3, -2e-3, 1e-3), Vector3::new(1e-4, 2e-4, -1e-4));
        let re = preintegrate(&s, db, &noise).unwrap();
        let (rot, vel, pos) = base.corrected(&db);
        assert!(rot.inverse().compose(&re.delta_rot).log().norm() < 1e-7);
        assert!((vel - re.delta_vel).norm() < 1e-6, "{}", (vel - re.delta_vel).norm());
        assert!((pos - re.delta_pos).norm() < 1e-6, "{}", (pos - re.delta_pos).norm());
    }
}
