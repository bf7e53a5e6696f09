//! Rigid-body geometry on SO(3) and SE(3).
//!
//! Conventions used across the crate:
//!
//! - Tangent vectors are ordered rotation first: `(ω, ρ)`.
//! - Perturbations are applied on the right: `retract(p, δ) = p ∘ exp(δ)`.
//! - Quaternions are kept unit-norm and canonical (`w ≥ 0`) after every
//!   operation that produces one.

mod jacobians;

pub use jacobians::{
    adjoint, hat, se3_left_jacobian, se3_left_jacobian_inv, se3_right_jacobian_inv,
    so3_left_jacobian, so3_left_jacobian_inv,
};

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Below this rotation angle `exp` switches to its series expansion.
pub const EXP_SMALL_ANGLE: f64 = 1e-8;

/// `log` refuses rotations whose angle is within this margin of π.
pub const LOG_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    #[error("rotation angle {angle} rad is too close to pi for a stable logarithm")]
    AngleNearPi { angle: f64 },
}

/// Unit quaternion rotation, canonicalized to `w >= 0`.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw quaternion components, normalizing them.
    ///
    /// Returns `None` for a zero or non-finite quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return None;
        }
        Some(Self::from_unit(UnitQuaternion::new_unchecked(q)))
    }

    /// Canonicalizes the sign and renormalizes unless the norm is already
    /// one to within a few ulps, so that serialized rotations parse back
    /// bit-for-bit.
    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        let raw = q.into_inner();
        let n2 = raw.norm_squared();
        let q = if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::new_unchecked(raw / n2.sqrt())
        };
        if q.w < 0.0 {
            Rotation(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Rotation(q)
        }
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self::from_unit(UnitQuaternion::from_rotation_matrix(
            &Rotation3::from_matrix_unchecked(*m),
        ))
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        so3_exp(&(axis.normalize() * angle))
    }

    /// Intrinsic ZYX Euler angles: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::from_unit(UnitQuaternion::from_euler_angles(roll, pitch, yaw))
    }

    /// `(roll, pitch, yaw)` of the ZYX decomposition.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        self.0.euler_angles()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// `[w, x, y, z]`
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::from_unit(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Self::from_unit(self.0.inverse())
    }

    /// `self⁻¹ ∘ other`, evaluated so that equal inputs give exactly the identity.
    pub fn between(&self, other: &Rotation) -> Rotation {
        let (a, b) = (self.0.quaternion(), other.0.quaternion());
        let (va, vb) = (a.imag(), b.imag());
        let w = a.w * b.w + va.dot(&vb);
        let v = vb * a.w - va * b.w - va.cross(&vb);
        Self::from_unit(UnitQuaternion::new_unchecked(Quaternion::new(w, v.x, v.y, v.z)))
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn log(&self) -> Result<Vector3<f64>, LieError> {
        so3_log(self)
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rotation(w: {w:.6}, x: {x:.6}, y: {y:.6}, z: {z:.6})")
    }
}

/// SO(3) exponential of a rotation vector.
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (real, imag_scale) = if theta < EXP_SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let v = omega * imag_scale;
    Rotation::from_unit(UnitQuaternion::new_unchecked(Quaternion::new(
        real, v.x, v.y, v.z,
    )))
}

/// SO(3) logarithm, returning the rotation vector.
pub fn so3_log(r: &Rotation) -> Result<Vector3<f64>, LieError> {
    let q = r.0.quaternion();
    let v = q.imag();
    let vn = v.norm();
    // canonical form guarantees w >= 0, so the angle lands in [0, π]
    let theta = 2.0 * vn.atan2(q.w);
    if theta >= PI - LOG_PI_MARGIN {
        return Err(LieError::AngleNearPi { angle: theta });
    }
    if vn < 1e-10 {
        // atan(x)/x ~ 1 - x^2/3
        let ratio = vn / q.w;
        Ok(v * (2.0 / q.w) * (1.0 - ratio * ratio / 3.0))
    } else {
        Ok(v * (theta / vn))
    }
}

/// Tangent vector of SE(3), rotation part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub rho: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, rho: Vector3<f64>) -> Self {
        Twist { omega, rho }
    }

    pub fn zero() -> Self {
        Twist::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    /// `[ω; ρ]`
    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.omega);
        v.fixed_rows_mut::<3>(3).copy_from(&self.rho);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.rho.iter()).all(|x| x.is_finite())
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.rho)
    }
}

/// Rigid transform `x_parent = R * x_child + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose::new(r, Vector3::zeros())
    }

    /// Builds a pose from the wire layout `[x, y, z, qw, qx, qy, qz]`.
    pub fn from_array(a: [f64; 7]) -> Option<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let rotation = Rotation::from_wxyz(a[3], a[4], a[5], a[6])?;
        Some(Pose::new(rotation, Vector3::new(a[0], a[1], a[2])))
    }

    /// Wire layout `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = self.rotation.wxyz();
        let t = &self.translation;
        [t.x, t.y, t.z, w, x, y, z]
    }

    /// `self ∘ other`: maps `other`'s child frame into `self`'s parent frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation.compose(&other.rotation),
            self.translation + self.rotation.rotate(&other.translation),
        )
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -r_inv.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(xi: &Twist) -> Pose {
        exp(xi)
    }

    pub fn log(&self) -> Result<Twist, LieError> {
        log(self)
    }

    pub fn retract(&self, delta: &Twist) -> Pose {
        retract(self, delta)
    }

    pub fn local_coordinates(&self, other: &Pose) -> Result<Twist, LieError> {
        local_coordinates(self, other)
    }
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        write!(
            f,
            "Pose(t: [{:.6}, {:.6}, {:.6}], {:?})",
            t.x, t.y, t.z, self.rotation
        )
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Pose::from_array(a).ok_or_else(|| {
            D::Error::custom("pose must be 7 finite numbers with a non-zero quaternion")
        })
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// Closed-form SE(3) exponential.
pub fn exp(xi: &Twist) -> Pose {
    let rotation = so3_exp(&xi.omega);
    let v = so3_left_jacobian(&xi.omega);
    Pose::new(rotation, v * xi.rho)
}

/// SE(3) logarithm. Fails when the rotation angle is within `LOG_PI_MARGIN` of π.
pub fn log(p: &Pose) -> Result<Twist, LieError> {
    let omega = so3_log(&p.rotation)?;
    let rho = so3_left_jacobian_inv(&omega) * p.translation;
    Ok(Twist::new(omega, rho))
}

/// `p ∘ exp(δ)`
pub fn retract(p: &Pose, delta: &Twist) -> Pose {
    p.compose(&exp(delta))
}

/// `log(a⁻¹ ∘ b)`, the twist taking `a` to `b` under `retract`.
pub fn local_coordinates(a: &Pose, b: &Pose) -> Result<Twist, LieError> {
    log(&a.inverse().compose(b))
}
