//! Embedded invariant suite run by `legcal selfcheck`.
//!
//! Each check draws its own inputs from a seeded generator and compares an
//! analytic quantity against an independent numerical one. The whole suite
//! runs in well under a second on an optimized build.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    linearize, solve_dense, solve_normal_equations, sqrt_information, FactorGraph, PriorFactor,
    RelativePoseFactor, Values, VariableKey,
};
use crate::kinematics::{JointSpec, KinematicChain};
use crate::lie::{exp, Pose, Twist};
use crate::par::Execution;
use crate::pipeline::calibrate;
use crate::sim::{simulate, ScenarioConfig};

/// Central-difference step used by every Jacobian check.
pub const FD_STEP: f64 = 1e-6;
/// Allowed mismatch between analytic and numerical Jacobians.
pub const JACOBIAN_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Test hook: perturbs one analytic Jacobian so the suite must fail.
    #[doc(hidden)]
    pub corrupt_jacobian: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// `max |a − n| / max(1, max |n|)`: relative for large entries, absolute near zero.
pub fn jacobian_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = numeric.amax().max(1.0);
    (analytic - numeric).amax() / scale
}

/// Central differences of `f` at zero, one column per tangent direction.
pub fn numerical_jacobian(dim: usize, f: impl Fn(&[f64]) -> Vector6<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(6, dim);
    let mut x = vec![0.0; dim];
    for k in 0..dim {
        x[k] = FD_STEP;
        let plus = f(&x);
        x[k] = -FD_STEP;
        let minus = f(&x);
        x[k] = 0.0;
        out.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
    }
    out
}

fn twist(d: &[f64]) -> Twist {
    Twist::from_vector(&Vector6::from_column_slice(d))
}

fn random_twist(rng: &mut impl Rng, scale: f64) -> Twist {
    Twist::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-scale..scale)))
}

fn random_sqrt_info(rng: &mut impl Rng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    sqrt_information(&(a * a.transpose() * 0.1 + Matrix6::identity() * 0.05)).expect("SPD by construction")
}

fn random_chain(rng: &mut impl Rng) -> KinematicChain {
    let n = rng.random_range(1..=6);
    let joints = (0..n)
        .map(|j| {
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector3::new(0.0, 0.0, 0.1);
            JointSpec::new(format!("j{j}"), axis, exp(&random_twist(rng, 0.8)))
        })
        .collect();
    KinematicChain::new(joints, exp(&random_twist(rng, 0.8)), vec![0.01; n], [0.0; 6]).expect("valid random chain")
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn exp_log_round_trip(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let xi = Twist::new(
            dir * rng.random_range(0.0..3.0),
            Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        );
        let back = exp(&xi).log().map_err(|e| e.to_string())?;
        worst = worst.max((back.to_vector() - xi.to_vector()).amax());
    }
    if worst <= 1e-9 {
        Ok(format!("max error {worst:.1e} over 1000 twists"))
    } else {
        Err(format!("max error {worst:.1e} exceeds 1e-9"))
    }
}

fn fk_jacobian(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let chain = random_chain(rng);
        let q: Vec<f64> = (0..chain.dof()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = chain.forward_kinematics(&q).map_err(|e| e.to_string())?;
        let analytic = chain.fk_jacobian(&q).map_err(|e| e.to_string())?;
        let numeric = numerical_jacobian(q.len(), |dq| {
            let qq: Vec<f64> = q.iter().zip(dq).map(|(a, b)| a + b).collect();
            let p = chain.forward_kinematics(&qq).expect("same arity");
            base.local_coordinates(&p).expect("small step").to_vector()
        });
        worst = worst.max(jacobian_error(&analytic, &numeric));
    }
    verdict(worst, "100 random chains")
}

fn verdict(worst: f64, what: &str) -> Result<String, String> {
    if worst <= JACOBIAN_TOLERANCE {
        Ok(format!("max relative error {worst:.1e} over {what}"))
    } else {
        Err(format!("max relative error {worst:.1e} over {what} exceeds {JACOBIAN_TOLERANCE:.0e}"))
    }
}

fn prior_jacobian(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let measured = exp(&random_twist(rng, 1.5));
        let x = measured.retract(&random_twist(rng, 0.8));
        let f = PriorFactor::with_sqrt_info(VariableKey::landmark(0), measured, random_sqrt_info(rng))
            .map_err(|e| e.to_string())?;
        let (_, jac) = f.linearize(&x).map_err(|e| e.to_string())?;
        let numeric = numerical_jacobian(6, |d| f.residual(&x.retract(&twist(d))).expect("small step"));
        worst = worst.max(jacobian_error(&DMatrix::from_column_slice(6, 6, jac.as_slice()), &numeric));
    }
    verdict(worst, "100 prior linearizations")
}

fn relative_jacobian(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cam = exp(&random_twist(rng, 1.5));
        let lm = exp(&random_twist(rng, 1.5));
        let measured = cam.inverse().compose(&lm).retract(&random_twist(rng, 0.8));
        let f = RelativePoseFactor::with_sqrt_info(
            VariableKey::camera(0),
            VariableKey::landmark(0),
            measured,
            random_sqrt_info(rng),
        )
        .map_err(|e| e.to_string())?;
        let mut lin = f.linearize(&cam, &lm).map_err(|e| e.to_string())?;
        if corrupt {
            lin.d_camera[(0, 0)] += 1e-3;
        }
        let n_cam = numerical_jacobian(6, |d| f.residual(&cam.retract(&twist(d)), &lm).expect("small step"));
        let n_lm = numerical_jacobian(6, |d| f.residual(&cam, &lm.retract(&twist(d))).expect("small step"));
        let a_cam = DMatrix::from_column_slice(6, 6, lin.d_camera.as_slice());
        let a_lm = DMatrix::from_column_slice(6, 6, lin.d_landmark.as_slice());
        worst = worst
            .max(jacobian_error(&a_cam, &n_cam))
            .max(jacobian_error(&a_lm, &n_lm));
    }
    verdict(worst, "100 relative linearizations")
}

/// A random graph with `6(M + N) ≤ 200` and every camera observed.
pub fn random_graph(rng: &mut impl Rng) -> (FactorGraph, Values) {
    let m = rng.random_range(1..=3);
    let n = rng.random_range(1..=(33 - m).min(20));
    let cams: Vec<Pose> = (0..m).map(|_| exp(&random_twist(rng, 1.0))).collect();
    let lms: Vec<Pose> = (0..n).map(|_| exp(&random_twist(rng, 1.0))).collect();
    let mut g = FactorGraph::with_variables(m, n);
    let mut seen = vec![false; m];
    for (l, lm) in lms.iter().enumerate() {
        let prior = PriorFactor::with_sqrt_info(
            VariableKey::landmark(l),
            lm.retract(&random_twist(rng, 0.05)),
            random_sqrt_info(rng),
        )
        .expect("valid");
        g.add_prior(prior);
        for (c, cam) in cams.iter().enumerate() {
            let forced = l == n - 1 && !seen[c];
            if forced || rng.random_bool(0.6) {
                seen[c] = true;
                let z = cam.inverse().compose(lm).retract(&random_twist(rng, 0.05));
                let f = RelativePoseFactor::with_sqrt_info(
                    VariableKey::camera(c),
                    VariableKey::landmark(l),
                    z,
                    random_sqrt_info(rng),
                )
                .expect("valid");
                g.add_relative(f);
            }
        }
    }
    let values = Values::new(
        cams.iter().map(|p| p.retract(&random_twist(rng, 0.1))).collect(),
        lms.iter().map(|p| p.retract(&random_twist(rng, 0.1))).collect(),
    );
    (g, values)
}

fn schur_vs_dense(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (g, values) = random_graph(rng);
        let sys = linearize(&g, &values, Execution::Sequential).map_err(|e| e.to_string())?;
        let lambda = if i % 2 == 0 { 0.0 } else { 1e-3 };
        let schur = solve_normal_equations(&sys, lambda, Execution::Sequential).map_err(|e| e.to_string())?;
        let dense = solve_dense(&sys, lambda).map_err(|e| e.to_string())?;
        worst = worst.max((schur.to_dvector() - dense.to_dvector()).amax());
    }
    if worst <= 1e-8 {
        Ok(format!("max difference {worst:.1e} over 50 graphs"))
    } else {
        Err(format!("max difference {worst:.1e} exceeds 1e-8"))
    }
}

fn noiseless_calibration(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let scenario = ScenarioConfig::random(rng, 2, 100);
    let data = simulate(&scenario).map_err(|e| e.to_string())?;
    let result = calibrate(&data.problem).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (name, est) in result.cameras.iter().zip(&result.extrinsics) {
        let d = data.ground_truth[name].inverse().compose(est);
        worst = worst.max(d.translation.norm()).max(d.rotation.angle());
    }
    if worst < 1e-7 && result.report.final_cost <= 1e-16 {
        Ok(format!("extrinsic error {worst:.1e}, final cost {:.1e}", result.report.final_cost))
    } else {
        Err(format!(
            "extrinsic error {worst:.1e}, final cost {:.1e} (limits 1e-7, 1e-16)",
            result.report.final_cost
        ))
    }
}

/// Runs every check; the suite passes iff every outcome passed.
pub fn run(options: &SelfCheckOptions) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    vec![
        check("exp_log_round_trip", || exp_log_round_trip(&mut rng)),
        check("fk_jacobian", || fk_jacobian(&mut rng)),
        check("prior_factor_jacobian", || prior_jacobian(&mut rng)),
        check("relative_factor_jacobian", || relative_jacobian(&mut rng, options.corrupt_jacobian)),
        check("schur_vs_dense", || schur_vs_dense(&mut rng)),
        check("noiseless_calibration", || noiseless_calibration(&mut rng)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for outcome in run(&SelfCheckOptions::default()) {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    #[test]
    fn corrupted_jacobian_is_named() {
        let outcomes = run(&SelfCheckOptions {
            corrupt_jacobian: true,
            ..Default::default()
        });
        let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        assert_eq!(failed, ["relative_factor_jacobian"]);
    }

    #[test]
    fn random_graphs_stay_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (g, _) = random_graph(&mut rng);
            assert!(6 * (g.num_cameras() + g.num_landmarks()) <= 200);
        }
    }
}
