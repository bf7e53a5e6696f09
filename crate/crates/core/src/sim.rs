//! Synthetic scenarios: ground-truth cameras, leg trajectories, visibility
//! culling, and noisy encoder/detection measurements.
//!
//! A scenario's `seed` fixes the trajectory (including random phases); noise
//! is drawn from a separate stream so Monte Carlo studies can redraw noise
//! over an identical trajectory. Noise is sampled as `σ · n` with standard
//! normal `n`, so scaling every σ by a constant scales every perturbation by
//! the same constant under a fixed seed.

use std::collections::BTreeMap;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SolverSettings;
use crate::kinematics::{JointState, KinematicChain, KinematicsError};
use crate::lie::{Pose, Rotation, Twist};
use crate::par::{map_range, Execution};
use crate::pipeline::{
    calibrate, compare_topologies, default_detection_sigmas, evaluate, CalibrationError,
    CalibrationProblem, Detection, ErrorStats, Frame, PoseError, TopologyComparison,
};

const TRAJECTORY_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("camera '{0}' never sees the marker")]
    NoVisibleFrames(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Every joint oscillates between its limits at its own frequency.
    #[default]
    Sinusoidal,
    /// Regular grid over the joint limits, subsampled to `n_frames`.
    GridSweep,
    /// Independent uniform samples within the joint limits.
    UniformRandom,
}

/// A simulated camera: true extrinsic plus a visibility cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub name: String,
    /// True `T_BC`; optical axis is the camera's +z.
    pub extrinsic: Pose,
    pub fov_half_angle_deg: f64,
    /// Accepted marker depth along the optical axis, metres.
    pub depth_range: [f64; 2],
}

impl CameraSpec {
    /// Whether a marker at `z` (camera frame) is inside the cone and depth interval.
    pub fn sees(&self, z: &Pose) -> bool {
        let p = z.translation;
        let off_axis = p.x.hypot(p.y).atan2(p.z);
        p.z > 0.0
            && p.z >= self.depth_range[0]
            && p.z <= self.depth_range[1]
            && off_axis <= self.fov_half_angle_deg.to_radians()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-joint encoder noise, radians.
    pub encoder_sigma: f64,
    /// Detection rotation noise per axis, radians.
    pub detection_sigma_rot: f64,
    /// Detection translation noise per axis, metres.
    pub detection_sigma_trans: f64,
    /// Correlation time of the encoder noise, seconds. Zero gives white
    /// noise; a positive value gives a stationary first-order Gauss-Markov
    /// process with standard deviation `encoder_sigma`, mimicking slowly
    /// varying joint compliance and backlash.
    #[serde(default)]
    pub encoder_correlation_s: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            encoder_sigma: 0.0,
            detection_sigma_rot: 0.0,
            detection_sigma_trans: 0.0,
            encoder_correlation_s: 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        NoiseConfig {
            encoder_sigma: self.encoder_sigma * s,
            detection_sigma_rot: self.detection_sigma_rot * s,
            detection_sigma_trans: self.detection_sigma_trans * s,
            encoder_correlation_s: self.encoder_correlation_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub chain: KinematicChain,
    pub cameras: Vec<CameraSpec>,
    pub n_frames: usize,
    pub duration_s: f64,
    #[serde(default)]
    pub trajectory: Trajectory,
    /// `[min, max]` per joint, radians.
    pub joint_limits: Vec<[f64; 2]>,
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// Camera pose at `position` looking at `target`, image y pointing towards `-up`.
pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Pose {
    let z = (target - position).normalize();
    let mut down = -up;
    if down.cross(&z).norm() < 1e-6 {
        down = Vector3::new(1.0, 0.0, 0.0);
    }
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Pose::new(Rotation::from_matrix(&m), position)
}

/// Joint limits used by the bundled scenarios for the demo leg.
pub fn demo_joint_limits() -> Vec<[f64; 2]> {
    vec![[-0.35, 0.35], [-1.4, -0.3], [0.4, 1.6]]
}

/// Centre of the demo leg's marker workspace, used to aim cameras.
fn demo_workspace_center() -> Vector3<f64> {
    Vector3::new(0.72, 0.3, -0.45)
}

impl ScenarioConfig {
    /// The bundled two-camera scenario: 1312 frames over 348 s, a wide
    /// head camera and a narrower second camera with partial overlap.
    ///
    /// Encoder noise is slowly varying (30 s correlation time), so the
    /// trajectory holds far fewer independent kinematic errors than frames
    /// and extrinsic errors settle at the millimetre-to-centimetre level.
    pub fn default_two_camera() -> Self {
        let c = demo_workspace_center();
        let up = Vector3::z();
        ScenarioConfig {
            chain: KinematicChain::demo_leg(),
            cameras: vec![
                CameraSpec {
                    name: "cam0".into(),
                    extrinsic: look_at(Vector3::new(0.95, 0.15, 0.05), c, up),
                    fov_half_angle_deg: 35.0,
                    depth_range: [0.1, 2.0],
                },
                CameraSpec {
                    name: "cam1".into(),
                    extrinsic: look_at(Vector3::new(1.05, 0.45, -0.1), c + Vector3::new(0.0, 0.08, -0.1), up),
                    fov_half_angle_deg: 25.0,
                    depth_range: [0.1, 2.0],
                },
            ],
            n_frames: 1312,
            duration_s: 348.0,
            trajectory: Trajectory::Sinusoidal,
            joint_limits: demo_joint_limits(),
            noise: NoiseConfig {
                encoder_sigma: 0.04,
                detection_sigma_rot: 0.5f64.to_radians(),
                detection_sigma_trans: 0.005,
                encoder_correlation_s: 30.0,
            },
            seed: 2024,
        }
    }

    /// A random scenario with `m` wide-angle cameras aimed at the demo leg's
    /// workspace from 0.5 to 0.9 m away, and `n` uniformly sampled frames.
    pub fn random(rng: &mut impl Rng, m: usize, n: usize) -> Self {
        let c = demo_workspace_center();
        let cameras = (0..m)
            .map(|k| {
                let dir = loop {
                    let d = Vector3::new(
                        rng.random_range(0.2..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.8),
                    );
                    if d.norm() > 0.1 {
                        break d.normalize();
                    }
                };
                let position = c + dir * rng.random_range(0.5..0.9);
                let aim = c + Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                );
                CameraSpec {
                    name: format!("cam{k}"),
                    extrinsic: look_at(position, aim, Vector3::z()),
                    fov_half_angle_deg: 80.0,
                    depth_range: [0.05, 3.0],
                }
            })
            .collect();
        ScenarioConfig {
            chain: KinematicChain::demo_leg(),
            cameras,
            n_frames: n,
            duration_s: n as f64 * 0.25,
            trajectory: Trajectory::UniformRandom,
            joint_limits: demo_joint_limits(),
            noise: NoiseConfig::zero(),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        if self.n_frames < 1 {
            return bad("n_frames must be at least 1".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad("duration_s must be positive".into());
        }
        if self.joint_limits.len() != self.chain.dof() {
            return bad(format!(
                "{} joint limits for a {}-joint chain",
                self.joint_limits.len(),
                self.chain.dof()
            ));
        }
        if self
            .joint_limits
            .iter()
            .any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return bad("joint limits must be finite with min <= max".into());
        }
        let n = &self.noise;
        if [n.encoder_sigma, n.detection_sigma_rot, n.detection_sigma_trans, n.encoder_correlation_s]
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("noise sigmas must be finite and non-negative".into());
        }
        let mut names: Vec<&str> = self.cameras.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.cameras.len() {
            return bad("camera names must be unique".into());
        }
        for c in &self.cameras {
            let [near, far] = c.depth_range;
            if !(c.fov_half_angle_deg > 0.0 && c.fov_half_angle_deg <= 180.0 && near >= 0.0 && near <= far) {
                return bad(format!("camera '{}' has an invalid FoV or depth range", c.name));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> BTreeMap<String, Pose> {
        self.cameras
            .iter()
            .map(|c| (c.name.clone(), c.extrinsic))
            .collect()
    }

    /// Noise-free joint angles and timestamps.
    pub fn trajectory_samples(&self) -> Vec<JointState> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(TRAJECTORY_STREAM);
        let n = self.n_frames;
        let dof = self.joint_limits.len();
        let time = |i: usize| self.duration_s * i as f64 / n as f64;
        match self.trajectory {
            Trajectory::Sinusoidal => {
                let phases: Vec<f64> = (0..dof)
                    .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                    .collect();
                (0..n)
                    .map(|i| {
                        let s = i as f64 / n as f64;
                        let q = self
                            .joint_limits
                            .iter()
                            .zip(&phases)
                            .enumerate()
                            .map(|(j, ([lo, hi], phase))| {
                                // incommensurate cycle counts decorrelate the joints
                                let cycles = 5.0 + 3.7 * j as f64;
                                let mid = 0.5 * (lo + hi);
                                let half = 0.5 * (hi - lo);
                                mid + half * (std::f64::consts::TAU * cycles * s + phase).sin()
                            })
                            .collect();
                        JointState::new(q, time(i))
                    })
                    .collect()
            }
            Trajectory::GridSweep => {
                let per_axis = ((n as f64).powf(1.0 / dof as f64).ceil() as usize).max(1);
                let total = per_axis.pow(dof as u32);
                (0..n)
                    .map(|i| {
                        let mut cell = i * total / n;
                        let q = self
                            .joint_limits
                            .iter()
                            .map(|[lo, hi]| {
                                let k = cell % per_axis;
                                cell /= per_axis;
                                if per_axis == 1 {
                                    0.5 * (lo + hi)
                                } else {
                                    let f = k as f64 / (per_axis - 1) as f64;
                                    lo * (1.0 - f) + hi * f
                                }
                            })
                            .collect();
                        JointState::new(q, time(i))
                    })
                    .collect()
            }
            Trajectory::UniformRandom => (0..n)
                .map(|i| {
                    let q = self
                        .joint_limits
                        .iter()
                        .map(|[lo, hi]| if lo < hi { rng.random_range(*lo..*hi) } else { *lo })
                        .collect();
                    JointState::new(q, time(i))
                })
                .collect(),
        }
    }
}

/// A simulated dataset with everything needed to score a calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub problem: CalibrationProblem,
    pub ground_truth: BTreeMap<String, Pose>,
    /// Joint angles before encoder noise, one per frame.
    pub true_joint_states: Vec<JointState>,
    /// Detections before detection noise, aligned with `problem.frames`.
    pub noiseless_detections: Vec<Vec<Detection>>,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates a dataset; trajectory and noise both follow `config.seed`.
pub fn simulate(config: &ScenarioConfig) -> Result<SimulatedDataset, SimError> {
    simulate_with_noise_seed(config, config.seed)
}

/// Simulates with the trajectory from `config.seed` and noise from `noise_seed`.
pub fn simulate_with_noise_seed(config: &ScenarioConfig, noise_seed: u64) -> Result<SimulatedDataset, SimError> {
    config.validate()?;
    let noise = config.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(NOISE_STREAM);

    let chain = if noise.encoder_sigma > 0.0 {
        config
            .chain
            .clone()
            .with_encoder_sigma(vec![noise.encoder_sigma; config.chain.dof()])?
    } else {
        config.chain.clone()
    };
    let defaults = default_detection_sigmas();
    let pick = |injected: f64, default: f64| if injected > 0.0 { injected } else { default };
    let rot = pick(noise.detection_sigma_rot, defaults[0]);
    let trans = pick(noise.detection_sigma_trans, defaults[3]);
    let recorded_sigmas = [rot, rot, rot, trans, trans, trans];
    let injected_sigmas = Vector6::new(
        noise.detection_sigma_rot,
        noise.detection_sigma_rot,
        noise.detection_sigma_rot,
        noise.detection_sigma_trans,
        noise.detection_sigma_trans,
        noise.detection_sigma_trans,
    );

    let truth = config.trajectory_samples();
    let inverses: Vec<Pose> = config.cameras.iter().map(|c| c.extrinsic.inverse()).collect();
    let mut seen = vec![false; config.cameras.len()];
    let mut frames = Vec::with_capacity(truth.len());
    let mut noiseless = Vec::with_capacity(truth.len());
    let mut encoder_error = vec![0.0; config.chain.dof()];
    let mut previous_time: Option<f64> = None;
    for state in &truth {
        let marker = config.chain.forward_kinematics(&state.angles)?;
        // draw encoder noise for every frame so the stream layout never
        // depends on visibility
        let phi = match previous_time {
            Some(t0) if noise.encoder_correlation_s > 0.0 => {
                (-(state.timestamp - t0) / noise.encoder_correlation_s).exp()
            }
            _ => 0.0,
        };
        let innovation = (1.0 - phi * phi).sqrt();
        for e in &mut encoder_error {
            *e = phi * *e + innovation * noise.encoder_sigma * gaussian(&mut rng);
        }
        previous_time = Some(state.timestamp);
        let recorded_q: Vec<f64> = state
            .angles
            .iter()
            .zip(&encoder_error)
            .map(|(q, e)| q + e)
            .collect();
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        for (k, (camera, inv)) in config.cameras.iter().zip(&inverses).enumerate() {
            let z = inv.compose(&marker);
            let delta = Vector6::from_fn(|i, _| injected_sigmas[i] * gaussian(&mut rng));
            if !camera.sees(&z) {
                continue;
            }
            seen[k] = true;
            clean.push(Detection::with_sigmas(k, z, &recorded_sigmas));
            noisy.push(Detection::with_sigmas(
                k,
                z.retract(&Twist::from_vector(&delta)),
                &recorded_sigmas,
            ));
        }
        frames.push(Frame {
            timestamp: state.timestamp,
            joint_state: JointState::new(recorded_q, state.timestamp),
            detections: noisy,
        });
        noiseless.push(clean);
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(SimError::NoVisibleFrames(config.cameras[k].name.clone()));
    }

    Ok(SimulatedDataset {
        problem: CalibrationProblem {
            cameras: config.cameras.iter().map(|c| c.name.clone()).collect(),
            chain,
            frames,
            settings: SolverSettings::default(),
        },
        ground_truth: config.ground_truth(),
        true_joint_states: truth,
        noiseless_detections: noiseless,
    })
}

/// Seed of Monte Carlo trial `trial` derived from a base seed.
pub fn derive_seed(seed: u64, trial: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(trial))
}

/// Error statistics at one noise level of a perturbation study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    /// Multiplier applied to every noise sigma of the scenario.
    pub scale: f64,
    pub stats: ErrorStats,
    /// Per-trial mean absolute translation error over cameras and axes, metres.
    pub trial_translation_mae_m: Vec<f64>,
}

/// Monte Carlo error curves over noise scale factors.
///
/// Trial `t` uses the same noise seed at every level, so levels differ only
/// by the noise magnitude. Statistics pool cameras and trials.
pub fn perturbation_study(
    config: &ScenarioConfig,
    scales: &[f64],
    trials: usize,
    exec: Execution,
) -> Result<Vec<StudyRow>, SimError> {
    if trials == 0 || scales.is_empty() {
        return Err(SimError::InvalidConfig("study needs at least one trial and one noise level".into()));
    }
    if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(SimError::InvalidConfig("noise scales must be finite and non-negative".into()));
    }
    let inner = if exec.is_parallel() {
        Execution::Sequential
    } else {
        exec
    };
    let jobs: Vec<(usize, usize)> = (0..scales.len())
        .flat_map(|l| (0..trials).map(move |t| (l, t)))
        .collect();
    let outcomes = map_range(exec, jobs.len(), |j| -> Result<Vec<PoseError>, SimError> {
        let (level, trial) = jobs[j];
        let scenario = ScenarioConfig {
            noise: config.noise.scaled(scales[level]),
            ..config.clone()
        };
        let mut data = simulate_with_noise_seed(&scenario, derive_seed(config.seed, trial as u64))?;
        data.problem.settings.execution = inner;
        let result = calibrate(&data.problem)?;
        Ok(evaluate(&result, &data.ground_truth)?.into_values().collect())
    });

    let mut per_level: Vec<Vec<Vec<PoseError>>> = vec![Vec::with_capacity(trials); scales.len()];
    for (j, outcome) in outcomes.into_iter().enumerate() {
        per_level[jobs[j].0].push(outcome?);
    }
    Ok(per_level
        .into_iter()
        .zip(scales)
        .map(|(runs, &scale)| {
            let trial_mae = runs
                .iter()
                .map(|errs| {
                    errs.iter()
                        .flat_map(|e| e.translation.iter().map(|v| v.abs()))
                        .sum::<f64>()
                        / (3 * errs.len()) as f64
                })
                .collect();
            let pooled: Vec<PoseError> = runs.into_iter().flatten().collect();
            StudyRow {
                scale,
                stats: ErrorStats::from_errors(&pooled).expect("trials > 0"),
                trial_translation_mae_m: trial_mae,
            }
        })
        .collect())
}

/// Single-camera versus joint calibration over `trials` noise draws of one scenario.
pub fn topology_study(config: &ScenarioConfig, trials: usize, exec: Execution) -> Result<TopologyComparison, SimError> {
    config.validate()?;
    if config.cameras.len() < 2 {
        return Err(CalibrationError::TooFewCameras(config.cameras.len()).into());
    }
    if trials == 0 {
        return Err(SimError::InvalidConfig("study needs at least one trial".into()));
    }
    // surface visibility problems as simulation errors before fanning out
    simulate(config)?;
    compare_topologies(trials, exec, |t| {
        let data = simulate_with_noise_seed(config, derive_seed(config.seed, t as u64))?;
        Ok((data.problem, data.ground_truth))
    })
}
