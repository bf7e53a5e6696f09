use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CalibrationError, CalibrationResult};
use crate::lie::Pose;

/// Error of one estimate against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    /// `est − gt` in metres.
    pub translation: [f64; 3],
    /// Roll, pitch, yaw (ZYX) of `gt⁻¹ ∘ est`, in degrees.
    pub rotation_deg: [f64; 3],
}

pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> PoseError {
    let dt = estimate.translation - ground_truth.translation;
    let (roll, pitch, yaw) = ground_truth.rotation.between(&estimate.rotation).euler_zyx();
    PoseError {
        translation: [dt.x, dt.y, dt.z],
        rotation_deg: [roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()],
    }
}

/// Per-axis mean absolute error and its spread over repeated runs.
///
/// The standard deviations are sample standard deviations of the absolute
/// errors and are absent when fewer than two runs were aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub runs: usize,
    pub translation_mae_m: [f64; 3],
    pub rotation_mae_deg: [f64; 3],
    pub translation_std_m: Option<[f64; 3]>,
    pub rotation_std_deg: Option<[f64; 3]>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, Option<f64>) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| {
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    (mean, std)
}

impl ErrorStats {
    /// Aggregates individual errors; `None` for an empty slice.
    pub fn from_errors(errors: &[PoseError]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut t_mae = [0.0; 3];
        let mut r_mae = [0.0; 3];
        let mut t_std = [0.0; 3];
        let mut r_std = [0.0; 3];
        let mut has_std = false;
        for axis in 0..3 {
            let (m, s) = mean_std(errors.iter().map(|e| e.translation[axis].abs()));
            t_mae[axis] = m;
            t_std[axis] = s.unwrap_or(0.0);
            has_std = s.is_some();
            let (m, s) = mean_std(errors.iter().map(|e| e.rotation_deg[axis].abs()));
            r_mae[axis] = m;
            r_std[axis] = s.unwrap_or(0.0);
        }
        Some(ErrorStats {
            runs: errors.len(),
            translation_mae_m: t_mae,
            rotation_mae_deg: r_mae,
            translation_std_m: has_std.then_some(t_std),
            rotation_std_deg: has_std.then_some(r_std),
        })
    }

    pub fn mean_translation_mae_m(&self) -> f64 {
        self.translation_mae_m.iter().sum::<f64>() / 3.0
    }

    pub fn mean_rotation_mae_deg(&self) -> f64 {
        self.rotation_mae_deg.iter().sum::<f64>() / 3.0
    }
}

/// Per-camera errors of a calibration result against ground truth.
pub fn evaluate(
    result: &CalibrationResult,
    ground_truth: &BTreeMap<String, Pose>,
) -> Result<BTreeMap<String, PoseError>, CalibrationError> {
    result
        .cameras
        .iter()
        .zip(&result.extrinsics)
        .map(|(name, est)| {
            let gt = ground_truth
                .get(name)
                .ok_or_else(|| CalibrationError::MissingGroundTruth(name.clone()))?;
            Ok((name.clone(), pose_error(est, gt)))
        })
        .collect()
}
