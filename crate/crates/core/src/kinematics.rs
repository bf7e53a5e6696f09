//! Serial revolute chains from the base frame to the marker frame.
//!
//! A chain is a list of joints, each with a fixed `origin` (parent link frame
//! to joint frame) followed by a rotation about the joint `axis`, and a final
//! fixed `tool` transform to the marker frame:
//!
//! ```text
//! T_BM(q) = origin_1 ∘ R(axis_1, q_1) ∘ … ∘ origin_n ∘ R(axis_n, q_n) ∘ tool
//! ```

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{adjoint, Pose, Rotation};

/// Lower bound applied to every diagonal entry of a propagated covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("expected {expected} joint angles, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub axis: [f64; 3],
    pub origin: Pose,
}

impl JointSpec {
    pub fn new(name: impl Into<String>, axis: Vector3<f64>, origin: Pose) -> Self {
        let axis = axis.normalize();
        JointSpec {
            name: name.into(),
            axis: [axis.x, axis.y, axis.z],
            origin,
        }
    }

    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub angles: Vec<f64>,
    pub timestamp: f64,
}

impl JointState {
    pub fn new(angles: Vec<f64>, timestamp: f64) -> Self {
        JointState { angles, timestamp }
    }
}

/// Result of first-order encoder covariance propagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndCovariance {
    /// `J diag(σ_enc²) Jᵀ + diag(σ_mount²)`
    pub dense: Matrix6<f64>,
    /// Diagonal of `dense`, floored at [`COVARIANCE_FLOOR`]; used as factor noise.
    pub diagonal: Matrix6<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain", into = "RawChain")]
pub struct KinematicChain {
    joints: Vec<JointSpec>,
    tool: Pose,
    encoder_sigma: Vec<f64>,
    mount_sigma: [f64; 6],
}

#[derive(Serialize, Deserialize)]
struct RawChain {
    joints: Vec<JointSpec>,
    tool: Pose,
    encoder_sigma: Vec<f64>,
    mount_sigma: [f64; 6],
}

impl TryFrom<RawChain> for KinematicChain {
    type Error = KinematicsError;
    fn try_from(r: RawChain) -> Result<Self, Self::Error> {
        KinematicChain::new(r.joints, r.tool, r.encoder_sigma, r.mount_sigma)
    }
}

impl From<KinematicChain> for RawChain {
    fn from(c: KinematicChain) -> Self {
        RawChain {
            joints: c.joints,
            tool: c.tool,
            encoder_sigma: c.encoder_sigma,
            mount_sigma: c.mount_sigma,
        }
    }
}

impl KinematicChain {
    pub fn new(
        joints: Vec<JointSpec>,
        tool: Pose,
        encoder_sigma: Vec<f64>,
        mount_sigma: [f64; 6],
    ) -> Result<Self, KinematicsError> {
        if joints.is_empty() {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()));
        }
        for j in &joints {
            let n = j.axis().norm();
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint '{}' axis norm is {n}, expected 1",
                    j.name
                )));
            }
        }
        if encoder_sigma.len() != joints.len() {
            return Err(KinematicsError::InvalidChain(format!(
                "{} encoder sigmas for {} joints",
                encoder_sigma.len(),
                joints.len()
            )));
        }
        if encoder_sigma
            .iter()
            .chain(mount_sigma.iter())
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(KinematicsError::InvalidChain(
                "sigmas must be finite and non-negative".into(),
            ));
        }
        Ok(KinematicChain {
            joints,
            tool,
            encoder_sigma,
            mount_sigma,
        })
    }

    /// A synthetic 3-DoF front-left leg: hip abduction about x, hip and knee
    /// flexion about y, with a 0.1 m hip offset and two 0.35 m links.
    ///
    /// Not measured from any real robot.
    pub fn demo_leg() -> Self {
        let joints = vec![
            JointSpec::new(
                "haa",
                Vector3::x(),
                Pose::from_translation(Vector3::new(0.37, 0.2, 0.0)),
            ),
            JointSpec::new(
                "hfe",
                Vector3::y(),
                Pose::from_translation(Vector3::new(0.0, 0.1, 0.0)),
            ),
            JointSpec::new(
                "kfe",
                Vector3::y(),
                Pose::from_translation(Vector3::new(0.0, 0.0, -0.35)),
            ),
        ];
        // marker plate sits on the foot, facing forward
        let tool = Pose::new(
            Rotation::from_euler_zyx(0.0, -std::f64::consts::FRAC_PI_2, 0.0),
            Vector3::new(0.0, 0.0, -0.35),
        );
        KinematicChain::new(
            joints,
            tool,
            vec![0.002; 3],
            [0.002, 0.002, 0.002, 0.001, 0.001, 0.001],
        )
        .expect("demo chain is valid")
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn tool(&self) -> &Pose {
        &self.tool
    }

    pub fn encoder_sigma(&self) -> &[f64] {
        &self.encoder_sigma
    }

    pub fn mount_sigma(&self) -> &[f64; 6] {
        &self.mount_sigma
    }

    pub fn with_encoder_sigma(mut self, sigma: Vec<f64>) -> Result<Self, KinematicsError> {
        self.encoder_sigma = sigma;
        Self::new(self.joints, self.tool, self.encoder_sigma, self.mount_sigma)
    }

    pub fn with_mount_sigma(mut self, sigma: [f64; 6]) -> Result<Self, KinematicsError> {
        self.mount_sigma = sigma;
        Self::new(self.joints, self.tool, self.encoder_sigma, self.mount_sigma)
    }

    /// Left-composes a fixed pose onto the chain's first joint origin.
    pub fn with_base(mut self, base: &Pose) -> Self {
        self.joints[0].origin = base.compose(&self.joints[0].origin);
        self
    }

    fn check_arity(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.joints.len() {
            return Err(KinematicsError::ArityMismatch {
                expected: self.joints.len(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Poses of every joint frame after its rotation, plus the final marker pose.
    fn joint_frames(&self, q: &[f64]) -> (Vec<Pose>, Pose) {
        let mut frames = Vec::with_capacity(self.joints.len());
        let mut acc = Pose::identity();
        for (joint, &angle) in self.joints.iter().zip(q) {
            let rot = Pose::from_rotation(Rotation::from_axis_angle(&joint.axis(), angle));
            acc = acc.compose(&joint.origin).compose(&rot);
            frames.push(acc);
        }
        let end = acc.compose(&self.tool);
        (frames, end)
    }

    /// Marker pose in the base frame, `T_BM(q)`.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose, KinematicsError> {
        self.check_arity(q)?;
        Ok(self.joint_frames(q).1)
    }

    /// 6×n Jacobian of the marker pose in the right-perturbation chart at `FK(q)`.
    ///
    /// Column `j` is the joint-`j` axis twist expressed in the marker frame.
    pub fn fk_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_arity(q)?;
        let (frames, end) = self.joint_frames(q);
        let end_inv = end.inverse();
        let mut jac = DMatrix::zeros(6, self.joints.len());
        for (j, (joint, frame)) in self.joints.iter().zip(&frames).enumerate() {
            let mut axis_twist = Vector6::zeros();
            axis_twist.fixed_rows_mut::<3>(0).copy_from(&joint.axis());
            let col = adjoint(&end_inv.compose(frame)) * axis_twist;
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    /// First-order propagation of encoder noise (plus mount noise) to the marker pose.
    pub fn propagate_covariance(&self, q: &[f64]) -> Result<EndCovariance, KinematicsError> {
        let jac = self.fk_jacobian(q)?;
        let mut dense = Matrix6::zeros();
        for (j, sigma) in self.encoder_sigma.iter().enumerate() {
            let col: Vector6<f64> = jac.fixed_view::<6, 1>(0, j).into();
            dense += col * col.transpose() * (sigma * sigma);
        }
        for (i, s) in self.mount_sigma.iter().enumerate() {
            dense[(i, i)] += s * s;
        }
        let diagonal = Matrix6::from_diagonal(&dense.diagonal().map(|v| v.max(COVARIANCE_FLOOR)));
        Ok(EndCovariance { dense, diagonal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{local_coordinates, Twist};
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize()
    }

    fn random_chain(rng: &mut impl Rng, n: usize) -> KinematicChain {
        fn pose(rng: &mut impl Rng) -> Pose {
            crate::lie::exp(&Twist::new(
                random_unit(rng) * rng.random_range(0.0..2.0),
                Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                ),
            ))
        }
        let joints = (0..n)
            .map(|i| JointSpec::new(format!("j{i}"), random_unit(rng), pose(rng)))
            .collect();
        let tool = pose(rng);
        KinematicChain::new(joints, tool, vec![0.01; n], [0.0; 6]).unwrap()
    }

    /// Homogeneous-matrix oracle: product of 4×4 origin and axis-angle matrices.
    fn fk_matrix_oracle(chain: &KinematicChain, q: &[f64]) -> Matrix4<f64> {
        let mut m = Matrix4::<f64>::identity();
        for (joint, &angle) in chain.joints().iter().zip(q) {
            let r = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(joint.axis()),
                angle,
            );
            m = m * joint.origin.matrix() * r.to_homogeneous();
        }
        m * chain.tool().matrix()
    }

    fn fd_jacobian(chain: &KinematicChain, q: &[f64]) -> DMatrix<f64> {
        let h = 1e-6;
        let base = chain.forward_kinematics(q).unwrap();
        let mut jac = DMatrix::zeros(6, q.len());
        for j in 0..q.len() {
            let mut qp = q.to_vec();
            let mut qm = q.to_vec();
            qp[j] += h;
            qm[j] -= h;
            let p = local_coordinates(&base, &chain.forward_kinematics(&qp).unwrap()).unwrap();
            let m = local_coordinates(&base, &chain.forward_kinematics(&qm).unwrap()).unwrap();
            jac.set_column(j, &((p.to_vector() - m.to_vector()) / (2.0 * h)));
        }
        jac
    }

    fn planar_one_joint(length: f64) -> KinematicChain {
        KinematicChain::new(
            vec![JointSpec::new("j0", Vector3::z(), Pose::identity())],
            Pose::from_translation(Vector3::new(length, 0.0, 0.0)),
            vec![0.01],
            [0.0; 6],
        )
        .unwrap()
    }

    #[test]
    fn zero_angles_compose_fixed_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let chain = random_chain(&mut rng, 3);
        let fixed = chain
            .joints()
            .iter()
            .fold(Pose::identity(), |acc, j| acc.compose(&j.origin))
            .compose(chain.tool());
        let fk = chain.forward_kinematics(&[0.0; 3]).unwrap();
        assert!((fk.matrix() - fixed.matrix()).amax() < 1e-14);
    }

    #[test]
    fn planar_quarter_turn() {
        let l = 0.7;
        let fk = planar_one_joint(l)
            .forward_kinematics(&[std::f64::consts::FRAC_PI_2])
            .unwrap();
        assert!((fk.translation - Vector3::new(0.0, l, 0.0)).norm() < 1e-15);
        let rz = Rotation::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        assert!(fk.rotation.inverse().compose(&rz).angle() < 1e-15);
    }

    #[test]
    fn matches_matrix_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let chain = random_chain(&mut rng, 3);
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fk = chain.forward_kinematics(&q).unwrap();
            assert!((fk.matrix() - fk_matrix_oracle(&chain, &q)).amax() < 1e-12);
        }
    }

    #[test]
    fn arity_is_checked() {
        let chain = KinematicChain::demo_leg();
        let err = chain.forward_kinematics(&[0.0, 0.0]).unwrap_err();
        assert_eq!(err, KinematicsError::ArityMismatch { expected: 3, got: 2 });
        assert!(chain.fk_jacobian(&[0.0; 4]).is_err());
        assert!(chain.propagate_covariance(&[]).is_err());
    }

    #[test]
    fn invalid_chains_are_rejected() {
        let j = JointSpec::new("a", Vector3::z(), Pose::identity());
        assert!(KinematicChain::new(vec![], Pose::identity(), vec![], [0.0; 6]).is_err());
        assert!(KinematicChain::new(vec![j.clone()], Pose::identity(), vec![], [0.0; 6]).is_err());
        assert!(KinematicChain::new(vec![j.clone()], Pose::identity(), vec![-1.0], [0.0; 6]).is_err());
        let mut bad = j;
        bad.axis = [0.0, 0.0, 2.0];
        assert!(KinematicChain::new(vec![bad], Pose::identity(), vec![0.0], [0.0; 6]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.random_range(1..=6);
            let chain = random_chain(&mut rng, n);
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let analytic = chain.fk_jacobian(&q).unwrap();
            let fd = fd_jacobian(&chain, &q);
            let rel = (&analytic - &fd).amax() / fd.amax().max(1e-12);
            assert!(rel <= 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn one_joint_jacobian_at_zero() {
        let l = 0.5;
        let chain = planar_one_joint(l);
        let jac = chain.fk_jacobian(&[0.0]).unwrap();
        let fd = fd_jacobian(&chain, &[0.0]);
        assert!((jac.fixed_view::<3, 1>(0, 0) - Vector3::z()).amax() < 1e-15);
        // the marker swings along +y of its own frame with lever arm l
        assert!((jac.fixed_view::<3, 1>(3, 0) - Vector3::new(0.0, l, 0.0)).amax() < 1e-15);
        assert!((&jac - &fd).amax() < 1e-9);
    }

    #[test]
    fn zero_lever_arm_has_no_translational_column() {
        let chain = KinematicChain::new(
            vec![JointSpec::new("j0", Vector3::new(1.0, 1.0, 0.0), Pose::identity())],
            Pose::from_rotation(Rotation::from_euler_zyx(0.3, 0.1, -0.2)),
            vec![0.01],
            [0.0; 6],
        )
        .unwrap();
        let jac = chain.fk_jacobian(&[0.8]).unwrap();
        assert!(jac.fixed_view::<3, 1>(3, 0).amax() < 1e-15);
    }

    #[test]
    fn covariance_edge_cases() {
        let s = [0.01, 0.02, 0.03, 0.004, 0.005, 0.006];
        let chain = KinematicChain::demo_leg()
            .with_encoder_sigma(vec![0.0; 3])
            .unwrap()
            .with_mount_sigma(s)
            .unwrap();
        let cov = chain.propagate_covariance(&[0.1, 0.4, -0.9]).unwrap();
        for i in 0..6 {
            assert!((cov.diagonal[(i, i)] - s[i] * s[i]).abs() < 1e-18);
        }

        let base = KinematicChain::demo_leg().with_mount_sigma([0.0; 6]).unwrap();
        let doubled = base.clone().with_encoder_sigma(vec![0.004; 3]).unwrap();
        let q = [0.2, 0.5, -1.0];
        let c1 = base.propagate_covariance(&q).unwrap().dense;
        let c2 = doubled.propagate_covariance(&q).unwrap().dense;
        assert!((c2 - c1 * 4.0).amax() < 1e-15);
    }

    #[test]
    fn covariance_output_is_diagonal_and_floored() {
        let chain = planar_one_joint(0.4).with_encoder_sigma(vec![0.0]).unwrap();
        let cov = chain.propagate_covariance(&[0.3]).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    assert!(cov.diagonal[(i, j)] >= COVARIANCE_FLOOR);
                } else {
                    assert_eq!(cov.diagonal[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn monte_carlo_matches_propagated_covariance() {
        let chain = planar_one_joint(0.6);
        let q = [0.4];
        let cov = chain.propagate_covariance(&q).unwrap().dense;
        let base = chain.forward_kinematics(&q).unwrap();
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let n = 100_000;
        let mut acc = Matrix6::zeros();
        for _ in 0..n {
            let qs = [q[0] + noise.sample(&mut rng)];
            let d = local_coordinates(&base, &chain.forward_kinematics(&qs).unwrap())
                .unwrap()
                .to_vector();
            acc += d * d.transpose();
        }
        let emp = acc / n as f64;
        for i in 0..6 {
            if cov[(i, i)] > 1e-10 {
                let rel = (emp[(i, i)] - cov[(i, i)]).abs() / cov[(i, i)];
                assert!(rel < 0.05, "axis {i}: {rel}");
            } else {
                assert!(emp[(i, i)] < 1e-10);
            }
        }
    }

    #[test]
    fn prepending_a_base_left_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let chain = random_chain(&mut rng, 3);
        let base = crate::lie::exp(&Twist::new(random_unit(&mut rng), Vector3::new(0.1, 0.2, 0.3)));
        let shifted = chain.clone().with_base(&base);
        for _ in 0..20 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = base.compose(&chain.forward_kinematics(&q).unwrap());
            let b = shifted.forward_kinematics(&q).unwrap();
            assert!((a.matrix() - b.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = KinematicChain::demo_leg();
        let s = serde_json::to_string(&chain).unwrap();
        let back: KinematicChain = serde_json::from_str(&s).unwrap();
        assert_eq!(back.dof(), 3);
        let q = [0.1, 0.2, 0.3];
        let a = chain.forward_kinematics(&q).unwrap();
        let b = back.forward_kinematics(&q).unwrap();
        assert!((a.matrix() - b.matrix()).amax() < 1e-15);
        let bad = s.replace("\"encoder_sigma\":[0.002,0.002,0.002]", "\"encoder_sigma\":[0.002]");
        assert!(serde_json::from_str::<KinematicChain>(&bad).is_err());
    }
}
