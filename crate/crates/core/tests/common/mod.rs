//! Oracles shared by the property and acceptance suites. They are written
//! from the textbook formulas, independently of the library code.

#![allow(dead_code)]

use gprloc::geom::{hat, Pose3, Rot3};
use gprloc::graph::imu::{gravity_vector, ImuBias, ImuNoise, ImuSample};
use gprloc::graph::{Factor, State, STATE_DIM};
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn vec3<R: Rng>(rng: &mut R, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * scale
}

/// Rotation with angle uniform in [0, max_angle) about a random axis.
pub fn rotation<R: Rng>(rng: &mut R, max_angle: f64) -> Rot3 {
    let axis = vec3(rng, 1.0).normalize();
    Rot3::exp(&(axis * rng.random_range(0.0..max_angle)))
}

pub fn pose<R: Rng>(rng: &mut R) -> Pose3 {
    Pose3::new(rotation(rng, 3.0), vec3(rng, 5.0))
}

pub fn state<R: Rng>(rng: &mut R) -> State {
    State::new(pose(rng), vec3(rng, 2.0), ImuBias::new(vec3(rng, 0.05), vec3(rng, 0.01)))
}

/// Central finite differences of the factor residual over the 15-dim
/// tangent of variable `var`.
pub fn numeric_jacobian(f: &Factor, values: &[State], var: usize, h: f64) -> DMatrix<f64> {
    let dim = f.dim();
    let mut j = DMatrix::zeros(dim, STATE_DIM);
    for k in 0..STATE_DIM {
        let mut d = [0.0; STATE_DIM];
        d[k] = h;
        let mut plus = values.to_vec();
        plus[var] = values[var].retract(&d);
        d[k] = -h;
        let mut minus = values.to_vec();
        minus[var] = values[var].retract(&d);
        let col = (f.residual(&plus) - f.residual(&minus)) / (2.0 * h);
        j.set_column(k, &col);
    }
    j
}

/// Largest relative Frobenius mismatch between analytic and numeric
/// Jacobian blocks of a factor.
pub fn jacobian_mismatch(f: &Factor, values: &[State]) -> f64 {
    let (_, blocks) = f.linearize(values);
    blocks
        .iter()
        .map(|(var, analytic)| {
            let numeric = numeric_jacobian(f, values, *var, 1e-6);
            (analytic - &numeric).norm() / numeric.norm().max(1.0)
        })
        .fold(0.0, f64::max)
}

/// `∫₀ᵀ exp(ω s) ds` and `∫₀ᵀ (T − s) exp(ω s) ds` for a constant body rate.
fn rate_integrals(omega: &Vector3<f64>, t: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let w = omega.norm();
    let k = hat(omega);
    let k2 = k * k;
    if w * t < 1e-6 {
        let i = Matrix3::identity();
        return (i * t + k * (t * t / 2.0) + k2 * (t.powi(3) / 6.0), i * (t * t / 2.0) + k * (t.powi(3) / 6.0) + k2 * (t.powi(4) / 24.0));
    }
    let th = w * t;
    let single = Matrix3::identity() * t + k * ((1.0 - th.cos()) / (w * w)) + k2 * ((th - th.sin()) / w.powi(3));
    let double = Matrix3::identity() * (t * t / 2.0) + k * ((th - th.sin()) / w.powi(3)) + k2 * ((th * th / 2.0 - 1.0 + th.cos()) / w.powi(4));
    (single, double)
}

/// Closed-form preintegrated deltas of constant body-frame specific force
/// `a` and rate `omega` held for `t` seconds, with zero bias.
pub fn constant_rate_deltas(a: &Vector3<f64>, omega: &Vector3<f64>, t: f64) -> (Rot3, Vector3<f64>, Vector3<f64>) {
    let (single, double) = rate_integrals(omega, t);
    (Rot3::exp(&(omega * t)), single * a, double * a)
}

/// Noise-free constant samples at `rate` Hz covering `[0, t]`.
pub fn constant_samples(a: &Vector3<f64>, omega: &Vector3<f64>, t: f64, rate: f64) -> Vec<ImuSample> {
    let n = (t * rate).round() as usize;
    (0..=n).map(|k| ImuSample { t: k as f64 * t / n as f64, accel: *a, gyro: *omega }).collect()
}

/// The state reached from `xi` after the constant-rate motion, with the
/// same bias.
pub fn propagate(xi: &State, a: &Vector3<f64>, omega: &Vector3<f64>, t: f64) -> State {
    let (dr, dv, dp) = constant_rate_deltas(a, omega, t);
    let g = gravity_vector();
    let r = xi.pose.rotation;
    State::new(
        Pose3::new(r.compose(&dr), xi.pose.translation + xi.velocity * t + g * (0.5 * t * t) + r.rotate(&dp)),
        xi.velocity + g * t + r.rotate(&dv),
        xi.bias,
    )
}

pub fn quiet_imu() -> ImuNoise {
    ImuNoise::default()
}
