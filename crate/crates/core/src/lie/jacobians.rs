//! Analytic Jacobians of the SO(3)/SE(3) exponential, in `(ω, ρ)` order.

use nalgebra::{Matrix3, Matrix6, Vector3};

use super::{Pose, Twist};

/// Threshold under which the Jacobian coefficients use their Taylor series.
const SERIES_ANGLE: f64 = 1e-2;

/// Skew-symmetric matrix with `hat(a) * b = a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3); also the `V` matrix coupling translation in `exp`.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (a, b) = if theta < SERIES_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + w * a + w * w * b
}

pub fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

fn q_coefficients_series(theta2: f64) -> (f64, f64, f64) {
    let t4 = theta2 * theta2;
    (
        1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
        1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0,
        1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0,
    )
}

fn q_coefficients_closed(theta: f64) -> (f64, f64, f64) {
    let (s, c) = theta.sin_cos();
    let theta2 = theta * theta;
    let t3 = theta2 * theta;
    (
        (theta - s) / t3,
        (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
        (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t3 * theta2),
    )
}

/// Translational coupling block of the SE(3) left Jacobian.
fn se3_q(omega: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SERIES_ANGLE {
        q_coefficients_series(theta2)
    } else {
        q_coefficients_closed(theta)
    };
    let wr = w * r;
    let rw = r * w;
    let wrw = wr * w;
    let ww = w * w;
    r * 0.5 + (wr + rw + wrw) * c1 + (ww * r + rw * w - wrw * 3.0) * c2 + (wrw * w + w * wrw) * c3
}

/// SE(3) left Jacobian, `[[J, 0], [Q, J]]` in `(ω, ρ)` order.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.omega);
    let q = se3_q(&xi.omega, &xi.rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let j_inv = so3_left_jacobian_inv(&xi.omega);
    let q = se3_q(&xi.omega, &xi.rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-j_inv * q * j_inv));
    out
}

/// Inverse right Jacobian: `log(exp(ξ) ∘ exp(δ)) ≈ ξ + Jr⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&-*xi)
}

/// Adjoint of `p`: `p ∘ exp(ξ) ∘ p⁻¹ = exp(Ad(p) ξ)`.
pub fn adjoint(p: &Pose) -> Matrix6<f64> {
    let r = p.rotation.matrix();
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(hat(&p.translation) * r));
    out
}
