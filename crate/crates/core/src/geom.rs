//! SO(3)/SE(3) values used by the factor graph.
//!
//! Rotations are stored as unit quaternions. Tangent vectors are ordered
//! rotation first, translation second: `(ωx, ωy, ωz, ρx, ρy, ρz)`.
//! Perturbations are applied on the right, so `boxplus(p, v) = p ∘ exp(v)` and
//! `boxminus(a, b) = log(b⁻¹ ∘ a)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Below this angle the exp/log maps switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Below this angle the Jacobian coefficients switch to series expansions.
/// The closed forms lose most of their digits to cancellation well above
/// [`SMALL_ANGLE`].
const SERIES_ANGLE: f64 = 1e-2;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// (1 - cos θ) / θ²
fn coef_b(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        (1.0 - theta.cos()) / (theta * theta)
    }
}

// (θ - sin θ) / θ³
fn coef_c(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

// 1/θ² - (1 + cos θ) / (2 θ sin θ)
fn coef_inv(theta: f64) -> f64 {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    }
}

/// Right Jacobian of SO(3).
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = hat(phi);
    Matrix3::identity() - w * coef_b(theta) + w * w * coef_c(theta)
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = hat(phi);
    Matrix3::identity() + w * 0.5 + w * w * coef_inv(theta)
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian(&(-phi))
}

/// A 3D rotation stored as a unit quaternion.
#[derive(Clone, Copy, PartialEq)]
pub struct Rot3(UnitQuaternion<f64>);

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Rot3(UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rot3(UnitQuaternion::new_normalize(q.into_inner()))
    }

    /// Rotation about +z by `angle` radians.
    pub fn rz(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    /// Planar rotation from roll, pitch, yaw (applied as `Rz * Ry * Rx`).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Rot3(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    /// Quaternion components `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Heading angle about +z.
    pub fn yaw(&self) -> f64 {
        self.0.euler_angles().2
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        let half = 0.5 * theta;
        let (w, s) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
        } else {
            (half.cos(), half.sin() / theta)
        };
        Rot3::from_wxyz(w, s * phi.x, s * phi.y, s * phi.z)
    }

    /// Rotation vector with angle in `[0, π]`. At exactly π the quaternion
    /// with non-negative scalar part is used.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let n = v.norm();
        let theta = 2.0 * n.atan2(w);
        if theta < SMALL_ANGLE {
            // 2 atan(n / w) / n ≈ (2 / w) (1 - n² / (3 w²))
            v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
        } else {
            v * (theta / n)
        }
    }

    pub fn inverse(&self) -> Self {
        Rot3(self.0.inverse())
    }

    pub fn compose(&self, other: &Rot3) -> Self {
        Rot3(UnitQuaternion::new_normalize((self.0 * other.0).into_inner()))
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }
}

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        self.compose(&rhs)
    }
}

impl fmt::Debug for Rot3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rot3(w={w:.6}, x={x:.6}, y={y:.6}, z={z:.6})")
    }
}

/// Element of the tangent space of SE(3), rotation part first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent6(pub Vector6<f64>);

impl Tangent6 {
    pub fn zero() -> Self {
        Tangent6(Vector6::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Tangent6(Vector6::new(
            rotation.x,
            rotation.y,
            rotation.z,
            translation.x,
            translation.y,
            translation.z,
        ))
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

impl From<Vector6<f64>> for Tangent6 {
    fn from(v: Vector6<f64>) -> Self {
        Tangent6(v)
    }
}

/// Rigid transform: `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose3 {
    pub rotation: Rot3,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rot3, translation: Vector3<f64>) -> Self {
        Pose3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose3::new(Rot3::identity(), Vector3::zeros())
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose3::new(Rot3::identity(), Vector3::new(x, y, z))
    }

    /// Planar pose: position `(x, y)` on the ground plane with heading `yaw`.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Pose3::new(Rot3::rz(yaw), Vector3::new(x, y, 0.0))
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.translation + self.rotation.rotate(&other.translation),
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let rinv = self.rotation.inverse();
        Pose3 {
            rotation: rinv,
            translation: -rinv.rotate(&self.translation),
        }
    }

    /// Maps a point from the local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in this frame.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn exp(xi: &Tangent6) -> Pose3 {
        let omega = xi.rotation();
        let rho = xi.translation();
        Pose3 {
            rotation: Rot3::exp(&omega),
            translation: so3_left_jacobian(&omega) * rho,
        }
    }

    pub fn log(&self) -> Tangent6 {
        let omega = self.rotation.log();
        // Jl⁻¹(ω) = Jr⁻¹(-ω)
        let rho = so3_right_jacobian_inv(&(-omega)) * self.translation;
        Tangent6::new(omega, rho)
    }

    /// Right difference `log(other⁻¹ ∘ self)`.
    pub fn boxminus(&self, other: &Pose3) -> Tangent6 {
        other.between(self).log()
    }

    /// Right retraction `self ∘ exp(delta)`.
    pub fn boxplus(&self, delta: &Tangent6) -> Pose3 {
        self.compose(&Pose3::exp(delta))
    }

    /// Adjoint matrix for the rotation-first tangent ordering.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    pub fn yaw(&self) -> f64 {
        self.rotation.yaw()
    }

    pub fn x(&self) -> f64 {
        self.translation.x
    }

    pub fn y(&self) -> f64 {
        self.translation.y
    }

    pub fn z(&self) -> f64 {
        self.translation.z
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

// Coupling block of the SE(3) left Jacobian (rotation-first ordering).
fn se3_q(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat(omega);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    r * 0.5 + (wr + rw + wrw) * c1 + (w * wr + rw * w - wrw * 3.0) * c2 + (wrw * w + w * wrw) * c3
}

/// Left Jacobian of SE(3).
pub fn se3_left_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    let omega = xi.rotation();
    let rho = xi.translation();
    let jl = so3_left_jacobian(&omega);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&omega, &rho));
    j
}

/// Right Jacobian of SE(3): `exp(ξ + δ) ≈ exp(ξ) exp(Jr δ)`.
pub fn se3_right_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian(&Tangent6(-xi.0))
}

/// Inverse right Jacobian of SE(3), by block inversion.
pub fn se3_right_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    let omega = -xi.rotation();
    let rho = -xi.translation();
    // Jr(ξ) = Jl(-ξ) = [[A, 0], [Q, A]] with A = Jl_so3(-ω).
    let a_inv = so3_right_jacobian_inv(&(-omega));
    let q = se3_q(&omega, &rho);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&a_inv);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&a_inv);
    j.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-a_inv * q * a_inv));
    j
}

/// Jacobians of `boxminus(a, b)` with respect to right perturbations of `a`
/// and `b`.
pub fn boxminus_jacobians(a: &Pose3, b: &Pose3) -> (Tangent6, Matrix6<f64>, Matrix6<f64>) {
    let e = b.between(a);
    let r = e.log();
    let jinv = se3_right_jacobian_inv(&r);
    let jb = -jinv * e.inverse().adjoint();
    (r, jinv, jb)
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}
