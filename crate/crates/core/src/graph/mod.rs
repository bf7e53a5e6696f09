//! Nonlinear least squares over SE(3)-valued variables.
//!
//! Two variable kinds exist: camera extrinsics (few, dense coupling) and
//! landmarks (many, each touching only its own prior and the cameras that
//! observed it). Factors are whitened by an upper-triangular square-root
//! information matrix and residuals live in the right-perturbation chart:
//! `r = S · log(measured⁻¹ ∘ predicted)`.

mod linear;
mod solver;

pub use linear::{
    linearize, marginal_covariance, marginal_covariances, solve_dense, solve_normal_equations,
    Delta, LinearSystem, LinearizedFactor,
};
pub use solver::{optimize, SolveReport, SolverSettings, Termination};

use std::fmt;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{adjoint, local_coordinates, se3_right_jacobian_inv, LieError, Pose, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    CameraExtrinsic,
    Landmark,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableKey {
    pub kind: VariableKind,
    pub index: usize,
}

impl VariableKey {
    pub fn camera(index: usize) -> Self {
        VariableKey {
            kind: VariableKind::CameraExtrinsic,
            index,
        }
    }

    pub fn landmark(index: usize) -> Self {
        VariableKey {
            kind: VariableKind::Landmark,
            index,
        }
    }
}

impl fmt::Debug for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::CameraExtrinsic => write!(f, "X{}", self.index),
            VariableKind::Landmark => write!(f, "L{}", self.index),
        }
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("factor {factor} on {keys:?}: {source}")]
    AngleNearPi {
        factor: usize,
        keys: Vec<VariableKey>,
        #[source]
        source: LieError,
    },
    #[error("indefinite system: {0}")]
    IndefiniteSystem(String),
    #[error("no estimate for variable {0}")]
    MissingEstimate(VariableKey),
    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
}

/// Upper-triangular `S` with `Sᵀ S = Σ⁻¹`.
pub fn sqrt_information(covariance: &Matrix6<f64>) -> Option<Matrix6<f64>> {
    if covariance.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sym = (covariance + covariance.transpose()) * 0.5;
    let info = sym.cholesky()?.inverse();
    let info = (info + info.transpose()) * 0.5;
    Some(info.cholesky()?.l().transpose())
}

/// Square-root information of a diagonal covariance given by standard deviations.
pub fn sqrt_information_from_sigmas(sigmas: &[f64; 6]) -> Option<Matrix6<f64>> {
    if sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return None;
    }
    Some(Matrix6::from_diagonal(&Vector6::from_iterator(
        sigmas.iter().map(|s| 1.0 / s),
    )))
}

fn check_sqrt_info(s: &Matrix6<f64>) -> Result<(), SolverError> {
    let upper = (0..6).all(|c| (c + 1..6).all(|r| s[(r, c)] == 0.0));
    let finite = s.iter().all(|v| v.is_finite());
    let nonsingular = (0..6).all(|i| s[(i, i)] != 0.0);
    if upper && finite && nonsingular {
        Ok(())
    } else {
        Err(SolverError::InvalidFactor(
            "square-root information must be finite, upper triangular and nonsingular".into(),
        ))
    }
}

/// Unary factor pulling one variable towards a measured pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub target: VariableKey,
    pub measured: Pose,
    pub sqrt_info: Matrix6<f64>,
}

impl PriorFactor {
    pub fn new(target: VariableKey, measured: Pose, covariance: &Matrix6<f64>) -> Result<Self, SolverError> {
        let sqrt_info = sqrt_information(covariance).ok_or(SolverError::InvalidCovariance)?;
        Ok(PriorFactor {
            target,
            measured,
            sqrt_info,
        })
    }

    pub fn with_sqrt_info(target: VariableKey, measured: Pose, sqrt_info: Matrix6<f64>) -> Result<Self, SolverError> {
        check_sqrt_info(&sqrt_info)?;
        Ok(PriorFactor {
            target,
            measured,
            sqrt_info,
        })
    }

    pub fn residual(&self, x: &Pose) -> Result<Vector6<f64>, LieError> {
        Ok(self.sqrt_info * local_coordinates(&self.measured, x)?.to_vector())
    }

    /// Whitened residual and its Jacobian w.r.t. a right perturbation of `x`.
    pub fn linearize(&self, x: &Pose) -> Result<(Vector6<f64>, Matrix6<f64>), LieError> {
        let e = local_coordinates(&self.measured, x)?;
        let jac = self.sqrt_info * se3_right_jacobian_inv(&e);
        Ok((self.sqrt_info * e.to_vector(), jac))
    }
}

/// Binary factor between a camera extrinsic `X` (camera in base) and a
/// landmark `L` (marker in base), measuring the marker in the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseFactor {
    pub from: VariableKey,
    pub to: VariableKey,
    pub measured: Pose,
    pub sqrt_info: Matrix6<f64>,
}

/// Residual and Jacobians of a [`RelativePoseFactor`].
#[derive(Debug, Clone, Copy)]
pub struct RelativeLinearization {
    pub residual: Vector6<f64>,
    pub d_camera: Matrix6<f64>,
    pub d_landmark: Matrix6<f64>,
}

impl RelativePoseFactor {
    pub fn new(camera: usize, landmark: usize, measured: Pose, covariance: &Matrix6<f64>) -> Result<Self, SolverError> {
        let sqrt_info = sqrt_information(covariance).ok_or(SolverError::InvalidCovariance)?;
        Ok(RelativePoseFactor {
            from: VariableKey::camera(camera),
            to: VariableKey::landmark(landmark),
            measured,
            sqrt_info,
        })
    }

    pub fn with_sqrt_info(
        from: VariableKey,
        to: VariableKey,
        measured: Pose,
        sqrt_info: Matrix6<f64>,
    ) -> Result<Self, SolverError> {
        if from.kind != VariableKind::CameraExtrinsic || to.kind != VariableKind::Landmark {
            return Err(SolverError::InvalidFactor(format!(
                "relative factor must connect a camera to a landmark, got {from} -> {to}"
            )));
        }
        check_sqrt_info(&sqrt_info)?;
        Ok(RelativePoseFactor {
            from,
            to,
            measured,
            sqrt_info,
        })
    }

    /// Marker pose in the camera frame implied by the two estimates.
    pub fn predict(x_cam: &Pose, landmark: &Pose) -> Pose {
        x_cam.inverse().compose(landmark)
    }

    pub fn residual(&self, x_cam: &Pose, landmark: &Pose) -> Result<Vector6<f64>, LieError> {
        let predicted = Self::predict(x_cam, landmark);
        Ok(self.sqrt_info * local_coordinates(&self.measured, &predicted)?.to_vector())
    }

    pub fn linearize(&self, x_cam: &Pose, landmark: &Pose) -> Result<RelativeLinearization, LieError> {
        let predicted = Self::predict(x_cam, landmark);
        let e: Twist = local_coordinates(&self.measured, &predicted)?;
        let jr_inv = se3_right_jacobian_inv(&e);
        // X ∘ exp(δ) turns the prediction into P ∘ exp(-Ad(P⁻¹) δ)
        let d_camera = -(self.sqrt_info * jr_inv * adjoint(&predicted.inverse()));
        let d_landmark = self.sqrt_info * jr_inv;
        Ok(RelativeLinearization {
            residual: self.sqrt_info * e.to_vector(),
            d_camera,
            d_landmark,
        })
    }
}

/// Current estimate of every variable, indexed by kind and index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Values {
    pub cameras: Vec<Pose>,
    pub landmarks: Vec<Pose>,
}

impl Values {
    pub fn new(cameras: Vec<Pose>, landmarks: Vec<Pose>) -> Self {
        Values { cameras, landmarks }
    }

    pub fn get(&self, key: VariableKey) -> Option<&Pose> {
        match key.kind {
            VariableKind::CameraExtrinsic => self.cameras.get(key.index),
            VariableKind::Landmark => self.landmarks.get(key.index),
        }
    }

    pub fn get_mut(&mut self, key: VariableKey) -> Option<&mut Pose> {
        match key.kind {
            VariableKind::CameraExtrinsic => self.cameras.get_mut(key.index),
            VariableKind::Landmark => self.landmarks.get_mut(key.index),
        }
    }

    /// Applies `p ← p ∘ exp(δ)` to every variable.
    pub fn retract(&self, delta: &Delta) -> Values {
        Values {
            cameras: self
                .cameras
                .iter()
                .zip(&delta.cameras)
                .map(|(p, d)| p.retract(d))
                .collect(),
            landmarks: self
                .landmarks
                .iter()
                .zip(&delta.landmarks)
                .map(|(p, d)| p.retract(d))
                .collect(),
        }
    }
}

/// Factor identifier: priors first, then relative factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorId {
    Prior(usize),
    Relative(usize),
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    priors: Vec<PriorFactor>,
    relatives: Vec<RelativePoseFactor>,
    num_cameras: usize,
    num_landmarks: usize,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares variables up to the given counts even if no factor touches them.
    pub fn with_variables(num_cameras: usize, num_landmarks: usize) -> Self {
        FactorGraph {
            num_cameras,
            num_landmarks,
            ..Default::default()
        }
    }

    fn touch(&mut self, key: VariableKey) {
        match key.kind {
            VariableKind::CameraExtrinsic => self.num_cameras = self.num_cameras.max(key.index + 1),
            VariableKind::Landmark => self.num_landmarks = self.num_landmarks.max(key.index + 1),
        }
    }

    pub fn add_prior(&mut self, f: PriorFactor) {
        self.touch(f.target);
        self.priors.push(f);
    }

    pub fn add_relative(&mut self, f: RelativePoseFactor) {
        self.touch(f.from);
        self.touch(f.to);
        self.relatives.push(f);
    }

    pub fn priors(&self) -> &[PriorFactor] {
        &self.priors
    }

    pub fn relatives(&self) -> &[RelativePoseFactor] {
        &self.relatives
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn num_factors(&self) -> usize {
        self.priors.len() + self.relatives.len()
    }

    pub fn factor_id(&self, i: usize) -> FactorId {
        if i < self.priors.len() {
            FactorId::Prior(i)
        } else {
            FactorId::Relative(i - self.priors.len())
        }
    }

    pub fn factor_keys(&self, i: usize) -> Vec<VariableKey> {
        match self.factor_id(i) {
            FactorId::Prior(p) => vec![self.priors[p].target],
            FactorId::Relative(r) => vec![self.relatives[r].from, self.relatives[r].to],
        }
    }

    /// Checks that `values` holds an estimate for every declared variable.
    pub fn check_values(&self, values: &Values) -> Result<(), SolverError> {
        if values.cameras.len() < self.num_cameras {
            return Err(SolverError::MissingEstimate(VariableKey::camera(values.cameras.len())));
        }
        if values.landmarks.len() < self.num_landmarks {
            return Err(SolverError::MissingEstimate(VariableKey::landmark(values.landmarks.len())));
        }
        Ok(())
    }

    /// Sum of squared whitened residuals.
    pub fn cost(&self, values: &Values) -> Result<f64, SolverError> {
        self.check_values(values)?;
        let mut total = 0.0;
        for (i, f) in self.priors.iter().enumerate() {
            let x = values.get(f.target).expect("checked");
            let r = f.residual(x).map_err(|e| self.angle_error(i, e))?;
            total += r.norm_squared();
        }
        for (i, f) in self.relatives.iter().enumerate() {
            let r = f
                .residual(&values.cameras[f.from.index], &values.landmarks[f.to.index])
                .map_err(|e| self.angle_error(self.priors.len() + i, e))?;
            total += r.norm_squared();
        }
        Ok(total)
    }

    pub(crate) fn angle_error(&self, factor: usize, source: LieError) -> SolverError {
        SolverError::AngleNearPi {
            factor,
            keys: self.factor_keys(factor),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{exp, retract};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_twist(rng: &mut impl Rng, scale: f64) -> Twist {
        Twist::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-scale..scale)))
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        exp(&random_twist(rng, 1.5))
    }

    fn random_sqrt_info(rng: &mut impl Rng) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose() * 0.1 + Matrix6::identity() * 0.05;
        sqrt_information(&cov).unwrap()
    }

    fn fd<F: Fn(&Twist) -> Vector6<f64>>(f: F) -> Matrix6<f64> {
        let h = 1e-6;
        let mut out = Matrix6::zeros();
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            let col = (f(&Twist::from_vector(&e)) - f(&Twist::from_vector(&-e))) / (2.0 * h);
            out.set_column(k, &col);
        }
        out
    }

    fn rel_err(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-12)
    }

    #[test]
    fn sqrt_info_reproduces_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose() + Matrix6::identity() * 0.1;
        let s = sqrt_information(&cov).unwrap();
        let info = cov.try_inverse().unwrap();
        assert!((s.transpose() * s - info).amax() <= 1e-9 * info.amax());
        for r in 1..6 {
            for c in 0..r {
                assert_eq!(s[(r, c)], 0.0);
            }
        }
        assert!(sqrt_information(&-Matrix6::<f64>::identity()).is_none());
    }

    #[test]
    fn prior_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let m = random_pose(&mut rng);
        let f = PriorFactor::with_sqrt_info(VariableKey::landmark(0), m, Matrix6::identity()).unwrap();
        assert!(f.residual(&m).unwrap().amax() < 1e-15);
        for _ in 0..50 {
            let d = random_twist(&mut rng, 0.1 / 6f64.sqrt());
            let r = f.residual(&retract(&m, &d)).unwrap();
            let dv = d.to_vector();
            assert!((r - dv).norm() <= 0.01 * dv.norm_squared() + 1e-15);
            let f2 = PriorFactor::with_sqrt_info(f.target, m, Matrix6::identity() * 2.0).unwrap();
            let r2 = f2.residual(&retract(&m, &d)).unwrap();
            assert!((r2 - r * 2.0).amax() < 1e-15);
        }
    }

    #[test]
    fn relative_residual_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = random_pose(&mut rng);
        let z = random_pose(&mut rng);
        let f = RelativePoseFactor::with_sqrt_info(
            VariableKey::camera(0),
            VariableKey::landmark(0),
            z,
            Matrix6::identity(),
        )
        .unwrap();
        assert!(f.residual(&x, &x.compose(&z)).unwrap().amax() < 1e-12);
        // identity camera: predicted = landmark, so perturbing the landmark moves r by δ
        let l = z;
        for _ in 0..20 {
            let d = random_twist(&mut rng, 0.05);
            let r = f.residual(&Pose::identity(), &retract(&l, &d)).unwrap();
            assert!((r - d.to_vector()).norm() <= 0.01 * d.to_vector().norm_squared() + 1e-12);
        }
        assert!(RelativePoseFactor::with_sqrt_info(
            VariableKey::landmark(0),
            VariableKey::camera(0),
            z,
            Matrix6::identity()
        )
        .is_err());
    }

    #[test]
    fn factor_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..100 {
            let s = random_sqrt_info(&mut rng);
            let m = random_pose(&mut rng);
            let x = retract(&m, &random_twist(&mut rng, 0.5));
            let prior = PriorFactor::with_sqrt_info(VariableKey::landmark(0), m, s).unwrap();
            let (_, jac) = prior.linearize(&x).unwrap();
            let num = fd(|d| prior.residual(&retract(&x, d)).unwrap());
            assert!(rel_err(&jac, &num) <= 1e-5);

            let cam = random_pose(&mut rng);
            let z = random_pose(&mut rng);
            let lm = retract(&cam.compose(&z), &random_twist(&mut rng, 0.5));
            let rel = RelativePoseFactor::with_sqrt_info(VariableKey::camera(0), VariableKey::landmark(0), z, s)
                .unwrap();
            let lin = rel.linearize(&cam, &lm).unwrap();
            let num_c = fd(|d| rel.residual(&retract(&cam, d), &lm).unwrap());
            let num_l = fd(|d| rel.residual(&cam, &retract(&lm, d)).unwrap());
            assert!(rel_err(&lin.d_camera, &num_c) <= 1e-5);
            assert!(rel_err(&lin.d_landmark, &num_l) <= 1e-5);
        }
    }

    #[test]
    fn cost_reports_offending_factor() {
        let mut g = FactorGraph::new();
        g.add_prior(
            PriorFactor::with_sqrt_info(VariableKey::landmark(0), Pose::identity(), Matrix6::identity()).unwrap(),
        );
        let flipped = Pose::from_rotation(crate::lie::Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI));
        let err = g.cost(&Values::new(vec![], vec![flipped])).unwrap_err();
        match err {
            SolverError::AngleNearPi { factor, keys, .. } => {
                assert_eq!(factor, 0);
                assert_eq!(keys, vec![VariableKey::landmark(0)]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            g.cost(&Values::default()),
            Err(SolverError::MissingEstimate(_))
        ));
    }
}
