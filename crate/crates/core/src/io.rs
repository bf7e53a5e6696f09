//! JSON file formats for chains, datasets, scenarios and calibration results.
//!
//! Poses are always `[x, y, z, qw, qx, qy, qz]` with metres and a canonical
//! quaternion. Angles inside files are radians; per-axis sigma vectors use
//! the `(ω, ρ)` order, three rotational entries first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix6;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{SolveReport, SolverSettings};
use crate::kinematics::{JointState, KinematicChain};
use crate::lie::Pose;
use crate::pipeline::{
    default_detection_sigmas, CalibrationProblem, CalibrationResult, Detection, ErrorStats, Frame,
    PoseError,
};
use crate::sim::{CameraSpec, NoiseConfig, ScenarioConfig, Trajectory};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl IoError {
    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

/// Reads and deserializes a JSON file, reporting parse errors with line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("file types always serialize");
    s.push('\n');
    s
}

fn resolve(base: &Path, relative: &str) -> PathBuf {
    let p = Path::new(relative);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_chain(path: &Path) -> Result<KinematicChain, IoError> {
    read_json(path)
}

fn chain_from(
    path: &Path,
    inline: Option<KinematicChain>,
    file: Option<&str>,
) -> Result<KinematicChain, IoError> {
    match (inline, file) {
        (Some(c), None) => Ok(c),
        (None, Some(f)) => load_chain(&resolve(path, f)),
        (Some(_), Some(_)) => Err(IoError::invalid(path, "give either \"chain\" or \"chain_file\", not both")),
        (None, None) => Err(IoError::invalid(path, "missing \"chain\" or \"chain_file\"")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub camera: String,
    pub pose: Pose,
    /// Per-axis standard deviations, `(ω, ρ)` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 6]>,
    /// Full 6×6 covariance, row-major; takes precedence over `sigma`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<[[f64; 6]; 6]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: f64,
    pub q: Vec<f64>,
    #[serde(default)]
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub cameras: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<KinematicChain>,
    pub frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<BTreeMap<String, Pose>>,
}

/// A loaded dataset: the calibration problem plus optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub problem: CalibrationProblem,
    pub ground_truth: Option<BTreeMap<String, Pose>>,
}

fn matrix_rows(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn is_diagonal(m: &Matrix6<f64>) -> bool {
    (0..6).all(|r| (0..6).all(|c| r == c || m[(r, c)] == 0.0))
}

impl DatasetFile {
    /// Serializable form with an inline chain; diagonal covariances become sigmas.
    pub fn from_dataset(problem: &CalibrationProblem, ground_truth: Option<&BTreeMap<String, Pose>>) -> Self {
        let frames = problem
            .frames
            .iter()
            .map(|f| FrameRecord {
                t: f.timestamp,
                q: f.joint_state.angles.clone(),
                detections: f
                    .detections
                    .iter()
                    .map(|d| {
                        let diagonal = is_diagonal(&d.covariance);
                        DetectionRecord {
                            camera: problem.cameras[d.camera].clone(),
                            pose: d.pose,
                            sigma: diagonal.then(|| std::array::from_fn(|i| d.covariance[(i, i)].sqrt())),
                            covariance: (!diagonal).then(|| matrix_rows(&d.covariance)),
                        }
                    })
                    .collect(),
            })
            .collect();
        DatasetFile {
            cameras: problem.cameras.clone(),
            chain_file: None,
            chain: Some(problem.chain.clone()),
            frames,
            ground_truth: ground_truth.cloned(),
        }
    }

    /// Resolves camera names and the chain; `path` anchors a relative `chain_file`.
    pub fn into_dataset(self, path: &Path) -> Result<Dataset, IoError> {
        let chain = chain_from(path, self.chain, self.chain_file.as_deref())?;
        let index: BTreeMap<&str, usize> = self
            .cameras
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        if index.len() != self.cameras.len() {
            return Err(IoError::invalid(path, "camera names must be unique"));
        }
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.into_iter().enumerate() {
            let mut detections = Vec::with_capacity(f.detections.len());
            for d in f.detections {
                let camera = *index.get(d.camera.as_str()).ok_or_else(|| {
                    IoError::invalid(path, format!("frame {i}: undeclared camera '{}'", d.camera))
                })?;
                let det = match (d.covariance, d.sigma) {
                    (Some(rows), _) => Detection::new(camera, d.pose, Matrix6::from_fn(|r, c| rows[r][c])),
                    (None, Some(sigma)) => Detection::with_sigmas(camera, d.pose, &sigma),
                    (None, None) => Detection::with_sigmas(camera, d.pose, &default_detection_sigmas()),
                };
                detections.push(det);
            }
            frames.push(Frame {
                timestamp: f.t,
                joint_state: JointState::new(f.q, f.t),
                detections,
            });
        }
        if let Some(gt) = &self.ground_truth {
            if let Some(extra) = gt.keys().find(|k| !index.contains_key(k.as_str())) {
                return Err(IoError::invalid(path, format!("ground truth for undeclared camera '{extra}'")));
            }
        }
        Ok(Dataset {
            problem: CalibrationProblem {
                cameras: self.cameras,
                chain,
                frames,
                settings: SolverSettings::default(),
            },
            ground_truth: self.ground_truth,
        })
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, IoError> {
    read_json::<DatasetFile>(path)?.into_dataset(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<KinematicChain>,
    pub cameras: Vec<CameraSpec>,
    pub n_frames: usize,
    pub duration_s: f64,
    #[serde(default)]
    pub trajectory: Trajectory,
    pub joint_limits: Vec<[f64; 2]>,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl From<&ScenarioConfig> for ScenarioFile {
    fn from(c: &ScenarioConfig) -> Self {
        ScenarioFile {
            chain_file: None,
            chain: Some(c.chain.clone()),
            cameras: c.cameras.clone(),
            n_frames: c.n_frames,
            duration_s: c.duration_s,
            trajectory: c.trajectory,
            joint_limits: c.joint_limits.clone(),
            noise: c.noise,
            seed: c.seed,
        }
    }
}

impl ScenarioFile {
    pub fn into_config(self, path: &Path) -> Result<ScenarioConfig, IoError> {
        let chain = chain_from(path, self.chain, self.chain_file.as_deref())?;
        let config = ScenarioConfig {
            chain,
            cameras: self.cameras,
            n_frames: self.n_frames,
            duration_s: self.duration_s,
            trajectory: self.trajectory,
            joint_limits: self.joint_limits,
            noise: self.noise,
            seed: self.seed,
        };
        config.validate().map_err(|e| IoError::invalid(path, e.to_string()))?;
        Ok(config)
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, IoError> {
    read_json::<ScenarioFile>(path)?.into_config(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEstimate {
    pub name: String,
    pub extrinsic: Pose,
    /// Marginal covariance in the right-perturbation chart, `(ω, ρ)` order, row-major.
    pub marginal: [[f64; 6]; 6],
    /// Square roots of the marginal diagonal.
    pub sigma: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub cameras: Vec<CameraEstimate>,
    pub report: SolveReport,
    pub n_frames_used: usize,
}

impl From<&CalibrationResult> for ResultFile {
    fn from(r: &CalibrationResult) -> Self {
        ResultFile {
            cameras: r
                .cameras
                .iter()
                .zip(&r.extrinsics)
                .zip(&r.marginals)
                .map(|((name, pose), cov)| CameraEstimate {
                    name: name.clone(),
                    extrinsic: *pose,
                    marginal: matrix_rows(cov),
                    sigma: std::array::from_fn(|i| cov[(i, i)].max(0.0).sqrt()),
                })
                .collect(),
            report: r.report,
            n_frames_used: r.n_frames_used,
        }
    }
}

impl From<ResultFile> for CalibrationResult {
    fn from(f: ResultFile) -> Self {
        CalibrationResult {
            cameras: f.cameras.iter().map(|c| c.name.clone()).collect(),
            extrinsics: f.cameras.iter().map(|c| c.extrinsic).collect(),
            marginals: f
                .cameras
                .iter()
                .map(|c| Matrix6::from_fn(|r, k| c.marginal[r][k]))
                .collect(),
            report: f.report,
            n_frames_used: f.n_frames_used,
        }
    }
}

pub fn load_result(path: &Path) -> Result<CalibrationResult, IoError> {
    Ok(read_json::<ResultFile>(path)?.into())
}

/// Per-camera evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEvaluation {
    pub name: String,
    pub translation_error_m: [f64; 3],
    pub rotation_error_deg: [f64; 3],
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub cameras: Vec<CameraEvaluation>,
}

impl EvaluationFile {
    pub fn new(errors: &BTreeMap<String, PoseError>, order: &[String]) -> Self {
        EvaluationFile {
            cameras: order
                .iter()
                .filter_map(|name| {
                    let e = errors.get(name)?;
                    Some(CameraEvaluation {
                        name: name.clone(),
                        translation_error_m: e.translation,
                        rotation_error_deg: e.rotation_deg,
                        stats: ErrorStats::from_errors(std::slice::from_ref(e))?,
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::simulate;

    fn tmp(name: &str, content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        fs::write(&p, content).unwrap();
        (dir, p)
    }

    #[test]
    fn chain_file_round_trip() {
        let chain = KinematicChain::demo_leg();
        let (_d, p) = tmp("chain.json", &to_json(&chain));
        assert_eq!(load_chain(&p).unwrap(), chain);
    }

    #[test]
    fn dataset_round_trip_through_file() {
        let mut cfg = ScenarioConfig::default_two_camera();
        cfg.n_frames = 40;
        let data = simulate(&cfg).unwrap();
        let file = DatasetFile::from_dataset(&data.problem, Some(&data.ground_truth));
        let (_d, p) = tmp("data.json", &to_json(&file));
        let loaded = load_dataset(&p).unwrap();
        assert_eq!(loaded.ground_truth.as_ref(), Some(&data.ground_truth));
        assert_eq!(loaded.problem.cameras, data.problem.cameras);
        assert_eq!(loaded.problem.chain, data.problem.chain);
        for (a, b) in loaded.problem.frames.iter().zip(&data.problem.frames) {
            assert_eq!(a.joint_state, b.joint_state);
            assert_eq!(a.detections.len(), b.detections.len());
            for (x, y) in a.detections.iter().zip(&b.detections) {
                assert_eq!(x.camera, y.camera);
                assert_eq!(x.pose, y.pose);
                assert!((x.covariance - y.covariance).amax() < 1e-20);
            }
        }
    }

    #[test]
    fn dataset_with_chain_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("leg.json"), to_json(&KinematicChain::demo_leg())).unwrap();
        let p = dir.path().join("d.json");
        fs::write(
            &p,
            r#"{"cameras":["c"],"chain_file":"leg.json","frames":[
                {"t":0.0,"q":[0,0,0],"detections":[{"camera":"c","pose":[0,0,1,1,0,0,0]}]},
                {"t":1.0,"q":[0,0,0],"detections":[{"camera":"c","pose":[0,0,1,1,0,0,0],"sigma":[1,1,1,2,2,2]}]}
            ]}"#,
        )
        .unwrap();
        let d = load_dataset(&p).unwrap();
        assert!(d.ground_truth.is_none());
        let s = default_detection_sigmas();
        assert!((d.problem.frames[0].detections[0].covariance[(0, 0)] - s[0] * s[0]).abs() < 1e-18);
        assert_eq!(d.problem.frames[1].detections[0].covariance[(4, 4)], 4.0);
    }

    #[test]
    fn malformed_json_reports_position() {
        let (_d, p) = tmp("bad.json", "{\n  \"cameras\": [\"a\",\n}");
        match load_dataset(&p) {
            Err(IoError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column >= 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn undeclared_camera_is_rejected() {
        let chain = to_json(&KinematicChain::demo_leg());
        let text = format!(
            r#"{{"cameras":["a"],"chain":{chain},"frames":[{{"t":0,"q":[0,0,0],"detections":[{{"camera":"b","pose":[0,0,1,1,0,0,0]}}]}}]}}"#
        );
        let (_d, p) = tmp("d.json", &text);
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("'b'"), "{err}");
    }

    #[test]
    fn scenario_round_trip() {
        let cfg = ScenarioConfig::default_two_camera();
        let (_d, p) = tmp("s.json", &to_json(&ScenarioFile::from(&cfg)));
        assert_eq!(load_scenario(&p).unwrap(), cfg);
    }

    #[test]
    fn result_round_trip() {
        let mut cfg = ScenarioConfig::default_two_camera();
        cfg.n_frames = 30;
        let data = simulate(&cfg).unwrap();
        let result = crate::pipeline::calibrate(&data.problem).unwrap();
        let (_d, p) = tmp("r.json", &to_json(&ResultFile::from(&result)));
        assert_eq!(load_result(&p).unwrap(), result);
    }
}
