use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{calibrate, evaluate, CalibrationError, CalibrationProblem, ErrorStats, PoseError};
use crate::lie::Pose;
use crate::par::{map_range, Execution};

/// Errors of one Monte Carlo draw, per camera in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyTrial {
    /// Each camera calibrated alone (F1).
    pub single: Vec<PoseError>,
    /// All cameras calibrated jointly (F2).
    pub joint: Vec<PoseError>,
}

fn mean_abs_translation(errors: &[PoseError]) -> f64 {
    let sum: f64 = errors
        .iter()
        .flat_map(|e| e.translation.iter().map(|v| v.abs()))
        .sum();
    sum / (3 * errors.len()) as f64
}

impl TopologyTrial {
    pub fn single_translation_mae(&self) -> f64 {
        mean_abs_translation(&self.single)
    }

    pub fn joint_translation_mae(&self) -> f64 {
        mean_abs_translation(&self.joint)
    }
}

/// Translation errors at or below this are rounding noise: they make the
/// ratio undefined and count as ties in the sign test.
pub const ERROR_FLOOR_M: f64 = 1e-9;

/// One-sided sign test of "joint beats single".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// Sign test over paired samples, counting pairs where `a < b` as wins.
pub fn sign_test(pairs: impl IntoIterator<Item = (f64, f64)>) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (a, b) in pairs {
        if a < b {
            wins += 1;
        } else if a > b {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let ln_half_n = n as f64 * 0.5f64.ln();
    // ln C(n, k) built incrementally from ln C(n, 0) = 0
    let mut ln_choose = 0.0;
    let mut p = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            p += (ln_choose + ln_half_n).exp();
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: p.min(1.0),
    }
}

/// Paired single-camera (F1) versus joint (F2) statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyComparison {
    pub cameras: Vec<String>,
    pub trials: Vec<TopologyTrial>,
    /// Per-camera statistics of the isolated calibrations.
    pub single: Vec<ErrorStats>,
    /// Per-camera statistics of the joint calibration.
    pub joint: Vec<ErrorStats>,
    pub single_translation_mae_m: f64,
    pub joint_translation_mae_m: f64,
    /// `joint / single` mean translation error; undefined when single is within [`ERROR_FLOOR_M`].
    pub ratio: Option<f64>,
    pub sign_test: SignTest,
}

/// Runs `trials` independent draws, calibrating every camera alone and all
/// cameras together on the same data.
///
/// `draw(trial)` must return a problem and its ground truth; it is called
/// once per trial and may be called from several threads.
pub fn compare_topologies<E, F>(trials: usize, exec: Execution, draw: F) -> Result<TopologyComparison, E>
where
    E: From<CalibrationError> + Send,
    F: Fn(usize) -> Result<(CalibrationProblem, BTreeMap<String, Pose>), E> + Sync + Send,
{
    let inner = if exec.is_parallel() {
        Execution::Sequential
    } else {
        exec
    };
    let outcomes = map_range(exec, trials, |t| -> Result<_, E> {
        let (mut problem, truth) = draw(t)?;
        if problem.cameras.len() < 2 {
            return Err(CalibrationError::TooFewCameras(problem.cameras.len()).into());
        }
        problem.settings.execution = inner;
        let joint_result = calibrate(&problem)?;
        let joint_errors = evaluate(&joint_result, &truth)?;
        let mut single = Vec::with_capacity(problem.cameras.len());
        let mut joint = Vec::with_capacity(problem.cameras.len());
        for (k, name) in problem.cameras.iter().enumerate() {
            let alone = calibrate(&problem.single_camera(k))?;
            single.push(evaluate(&alone, &truth)?[name]);
            joint.push(joint_errors[name]);
        }
        Ok((problem.cameras, TopologyTrial { single, joint }))
    });

    let mut cameras = Vec::new();
    let mut results = Vec::with_capacity(trials);
    for outcome in outcomes {
        let (names, trial) = outcome?;
        cameras = names;
        results.push(trial);
    }
    if results.is_empty() {
        return Err(CalibrationError::EmptyProblem.into());
    }

    let per_camera = |pick: fn(&TopologyTrial) -> &Vec<PoseError>| -> Vec<ErrorStats> {
        (0..cameras.len())
            .map(|k| {
                let errs: Vec<PoseError> = results.iter().map(|t| pick(t)[k]).collect();
                ErrorStats::from_errors(&errs).expect("at least one trial")
            })
            .collect()
    };
    let single = per_camera(|t| &t.single);
    let joint = per_camera(|t| &t.joint);

    let n = results.len() as f64;
    let single_mae = results.iter().map(|t| t.single_translation_mae()).sum::<f64>() / n;
    let joint_mae = results.iter().map(|t| t.joint_translation_mae()).sum::<f64>() / n;
    let ratio = (single_mae > ERROR_FLOOR_M).then(|| joint_mae / single_mae);
    let sign = sign_test(
        results.iter().map(|t| {
            let snap = |v: f64| if v <= ERROR_FLOOR_M { 0.0 } else { v };
            (snap(t.joint_translation_mae()), snap(t.single_translation_mae()))
        }),
    );

    Ok(TopologyComparison {
        cameras,
        trials: results,
        single,
        joint,
        single_translation_mae_m: single_mae,
        joint_translation_mae_m: joint_mae,
        ratio,
        sign_test: sign,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_matches_binomial_tail() {
        // P(X ≥ 8 | n = 10): (45 + 10 + 1) / 1024
        let t = sign_test((0..10).map(|i| if i < 8 { (0.0, 1.0) } else { (1.0, 0.0) }));
        assert_eq!((t.wins, t.losses, t.ties), (8, 2, 0));
        assert!((t.p_value - 56.0 / 1024.0).abs() < 1e-12);
    }

    #[test]
    fn sign_test_excludes_ties() {
        let t = sign_test([(1.0, 1.0), (0.0, 1.0), (2.0, 2.0)]);
        assert_eq!((t.wins, t.losses, t.ties), (1, 0, 2));
        assert!((t.p_value - 0.5).abs() < 1e-12);
        let none = sign_test([(1.0, 1.0)]);
        assert_eq!(none.p_value, 1.0);
    }

    #[test]
    fn sign_test_large_sample() {
        // 50 wins out of 50 must not underflow to zero or exceed one
        let t = sign_test((0..50).map(|_| (0.0, 1.0)));
        assert!((t.p_value - 0.5f64.powi(50)).abs() < 1e-25);
    }
}
