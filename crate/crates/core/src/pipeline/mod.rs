//! From a dataset of joint states and marker detections to camera extrinsics.
//!
//! Every frame with at least one detection becomes a landmark `Lᵢ` carrying a
//! forward-kinematics prior, and every detection a relative factor between
//! the detecting camera `Xₖ` and `Lᵢ`. Cameras are seeded in closed form from
//! their first few detections, which places plain Gauss-Newton inside its
//! convergence basin.

mod eval;
mod topology;

pub use eval::{evaluate, pose_error, ErrorStats, PoseError};
pub use topology::{compare_topologies, sign_test, SignTest, TopologyComparison, TopologyTrial};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::graph::{
    linearize, marginal_covariances, optimize, FactorGraph, LinearSystem, PriorFactor,
    RelativePoseFactor, SolveReport, SolverError, SolverSettings, Values, VariableKey,
};
use crate::kinematics::{JointState, KinematicChain, KinematicsError};
use crate::lie::{Pose, Rotation};

/// Detection rotation noise used when a dataset gives none: 0.5°.
pub const DEFAULT_DETECTION_SIGMA_ROT: f64 = 0.5 * std::f64::consts::PI / 180.0;
/// Detection translation noise used when a dataset gives none: 5 mm.
pub const DEFAULT_DETECTION_SIGMA_TRANS: f64 = 0.005;

/// Number of detections averaged into each camera's initial guess.
const SEED_DETECTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("problem has no cameras or no frames")]
    EmptyProblem,
    #[error("frame {frame} references camera index {camera}, but only {declared} cameras are declared")]
    UnknownCamera {
        frame: usize,
        camera: usize,
        declared: usize,
    },
    #[error("camera '{0}' has no detections")]
    UnobservedCamera(String),
    #[error("frame {frame}: {source}")]
    Kinematics {
        frame: usize,
        #[source]
        source: KinematicsError,
    },
    #[error("frame {frame}: detection covariance is not symmetric positive definite")]
    InvalidCovariance { frame: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("no ground truth for camera '{0}'")]
    MissingGroundTruth(String),
    #[error("topology comparison needs at least two cameras, got {0}")]
    TooFewCameras(usize),
}

/// One camera's measurement of the marker pose in its optical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Index into [`CalibrationProblem::cameras`].
    pub camera: usize,
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
}

impl Detection {
    pub fn new(camera: usize, pose: Pose, covariance: Matrix6<f64>) -> Self {
        Detection {
            camera,
            pose,
            covariance,
        }
    }

    /// Diagonal covariance from per-axis standard deviations, `(ω, ρ)` order.
    pub fn with_sigmas(camera: usize, pose: Pose, sigmas: &[f64; 6]) -> Self {
        let var = Vector6::from_iterator(sigmas.iter().map(|s| s * s));
        Detection::new(camera, pose, Matrix6::from_diagonal(&var))
    }

    /// Isotropic default noise (0.5°, 5 mm).
    pub fn with_default_noise(camera: usize, pose: Pose) -> Self {
        Detection::with_sigmas(camera, pose, &default_detection_sigmas())
    }
}

pub fn default_detection_sigmas() -> [f64; 6] {
    let (r, t) = (DEFAULT_DETECTION_SIGMA_ROT, DEFAULT_DETECTION_SIGMA_TRANS);
    [r, r, r, t, t, t]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub joint_state: JointState,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem {
    pub cameras: Vec<String>,
    pub chain: KinematicChain,
    pub frames: Vec<Frame>,
    pub settings: SolverSettings,
}

/// The assembled graph together with its initial estimate.
#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub graph: FactorGraph,
    pub initial: Values,
    /// Frame index of each landmark.
    pub landmark_frames: Vec<usize>,
    /// Frames skipped because a detection was too far from the seed to linearize.
    pub dropped_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub cameras: Vec<String>,
    /// `T_BCₖ` for every declared camera, in declaration order.
    pub extrinsics: Vec<Pose>,
    pub marginals: Vec<Matrix6<f64>>,
    pub report: SolveReport,
    pub n_frames_used: usize,
}

impl CalibrationResult {
    pub fn extrinsic(&self, name: &str) -> Option<&Pose> {
        let i = self.cameras.iter().position(|c| c == name)?;
        self.extrinsics.get(i)
    }
}

impl CalibrationProblem {
    /// Checks the structural invariants: at least one camera and frame, valid
    /// camera references, matching joint arity, and every camera observed.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.cameras.is_empty() || self.frames.is_empty() {
            return Err(CalibrationError::EmptyProblem);
        }
        let mut seen = vec![false; self.cameras.len()];
        for (i, frame) in self.frames.iter().enumerate() {
            let n = frame.joint_state.angles.len();
            if n != self.chain.dof() {
                return Err(CalibrationError::Kinematics {
                    frame: i,
                    source: KinematicsError::ArityMismatch {
                        expected: self.chain.dof(),
                        got: n,
                    },
                });
            }
            for d in &frame.detections {
                match seen.get_mut(d.camera) {
                    Some(s) => *s = true,
                    None => {
                        return Err(CalibrationError::UnknownCamera {
                            frame: i,
                            camera: d.camera,
                            declared: self.cameras.len(),
                        })
                    }
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(CalibrationError::UnobservedCamera(self.cameras[k].clone()));
        }
        Ok(())
    }

    /// The same data restricted to one camera, which becomes camera 0.
    pub fn single_camera(&self, camera: usize) -> CalibrationProblem {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame {
                timestamp: f.timestamp,
                joint_state: f.joint_state.clone(),
                detections: f
                    .detections
                    .iter()
                    .filter(|d| d.camera == camera)
                    .map(|d| Detection {
                        camera: 0,
                        ..d.clone()
                    })
                    .collect(),
            })
            .collect();
        CalibrationProblem {
            cameras: vec![self.cameras[camera].clone()],
            chain: self.chain.clone(),
            frames,
            settings: self.settings,
        }
    }
}

/// Projects a sum of rotation matrices onto SO(3) (chordal L2 mean).
fn chordal_mean(rotations: &[Rotation]) -> Rotation {
    let sum: Matrix3<f64> = rotations.iter().map(|r| r.matrix()).sum();
    let svd = sum.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * v_t).determinant().signum();
    Rotation::from_matrix(&(u * d * v_t))
}

/// Closed-form camera seed `mean(FK(qᵢ) ∘ Zᵢ⁻¹)` over the first detections.
fn seed_camera(samples: &[Pose]) -> Pose {
    let rotations: Vec<Rotation> = samples.iter().map(|p| p.rotation).collect();
    let t = samples.iter().map(|p| p.translation).sum::<Vector3<f64>>() / samples.len() as f64;
    Pose::new(chordal_mean(&rotations), t)
}

/// Builds the calibration factor graph and its initial estimate.
pub fn build_graph(problem: &CalibrationProblem) -> Result<BuiltGraph, CalibrationError> {
    problem.validate()?;
    let m = problem.cameras.len();

    let mut fk = Vec::with_capacity(problem.frames.len());
    for (i, frame) in problem.frames.iter().enumerate() {
        let q = &frame.joint_state.angles;
        let pose = problem
            .chain
            .forward_kinematics(q)
            .map_err(|source| CalibrationError::Kinematics { frame: i, source })?;
        fk.push(pose);
    }

    let mut samples: Vec<Vec<Pose>> = vec![Vec::new(); m];
    for (frame, pose) in problem.frames.iter().zip(&fk) {
        for d in &frame.detections {
            if samples[d.camera].len() < SEED_DETECTIONS {
                samples[d.camera].push(pose.compose(&d.pose.inverse()));
            }
        }
    }
    let cameras: Vec<Pose> = samples.iter().map(|s| seed_camera(s)).collect();

    let mut graph = FactorGraph::with_variables(m, 0);
    let mut landmarks = Vec::new();
    let mut landmark_frames = Vec::new();
    let mut dropped_frames = Vec::new();
    for (i, frame) in problem.frames.iter().enumerate() {
        if frame.detections.is_empty() {
            continue;
        }
        let landmark = landmarks.len();
        let mut relatives = Vec::with_capacity(frame.detections.len());
        for d in &frame.detections {
            let f = RelativePoseFactor::new(d.camera, landmark, d.pose, &d.covariance)
                .map_err(|_| CalibrationError::InvalidCovariance { frame: i })?;
            relatives.push(f);
        }
        if let Some(bad) = relatives
            .iter()
            .find(|f| f.residual(&cameras[f.from.index], &fk[i]).is_err())
        {
            log::warn!(
                "dropping frame {i} (t = {}): detection by '{}' is near π from the initial estimate",
                frame.timestamp,
                problem.cameras[bad.from.index]
            );
            dropped_frames.push(i);
            continue;
        }
        let cov = problem
            .chain
            .propagate_covariance(&frame.joint_state.angles)
            .map_err(|source| CalibrationError::Kinematics { frame: i, source })?;
        graph.add_prior(PriorFactor::new(VariableKey::landmark(landmark), fk[i], &cov.diagonal)?);
        for f in relatives {
            graph.add_relative(f);
        }
        landmarks.push(fk[i]);
        landmark_frames.push(i);
    }

    // dropping frames may have removed a camera's only detections
    let mut observed = vec![false; m];
    for f in graph.relatives() {
        observed[f.from.index] = true;
    }
    if let Some(k) = observed.iter().position(|o| !o) {
        return Err(CalibrationError::UnobservedCamera(problem.cameras[k].clone()));
    }

    Ok(BuiltGraph {
        graph,
        initial: Values::new(cameras, landmarks),
        landmark_frames,
        dropped_frames,
    })
}

/// Everything produced by a calibration run, including the solved graph.
#[derive(Debug, Clone)]
pub struct Solution {
    pub result: CalibrationResult,
    pub built: BuiltGraph,
    /// Final estimate of every camera and landmark.
    pub values: Values,
    /// Linear system at the final estimate.
    pub system: LinearSystem,
}

/// Like [`calibrate`], but also returns the graph, final estimate and linear system.
pub fn solve(problem: &CalibrationProblem) -> Result<Solution, CalibrationError> {
    let built = build_graph(problem)?;
    let (values, report) = optimize(&built.graph, &built.initial, &problem.settings)?;
    if !report.converged {
        log::warn!(
            "optimizer stopped without converging ({:?}) after {} iterations",
            report.termination,
            report.iterations
        );
    }
    let exec = problem.settings.execution;
    let system = linearize(&built.graph, &values, exec)?;
    let keys: Vec<VariableKey> = (0..problem.cameras.len()).map(VariableKey::camera).collect();
    let marginals = marginal_covariances(&system, &keys, exec)?;
    let result = CalibrationResult {
        cameras: problem.cameras.clone(),
        extrinsics: values.cameras.clone(),
        marginals,
        report,
        n_frames_used: built.landmark_frames.len(),
    };
    Ok(Solution {
        result,
        built,
        values,
        system,
    })
}

/// Builds the graph, optimizes it and extracts camera estimates with marginals.
pub fn calibrate(problem: &CalibrationProblem) -> Result<CalibrationResult, CalibrationError> {
    Ok(solve(problem)?.result)
}
