//! Linearization and the Schur-structured normal-equation solve.
//!
//! Variable ordering for every dense representation is cameras first, then
//! landmarks, six columns each in `(ω, ρ)` order.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::{FactorGraph, FactorId, SolverError, Values, VariableKey, VariableKind};
use crate::lie::Twist;
use crate::par::{map_range, Execution};

/// One factor's whitened Jacobian blocks `A_k` and residual `b`.
#[derive(Debug, Clone)]
pub struct LinearizedFactor {
    pub blocks: Vec<(VariableKey, Matrix6<f64>)>,
    pub residual: Vector6<f64>,
}

/// Stacked whitened system `A δ ≈ -b` at the current estimates.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub factors: Vec<LinearizedFactor>,
    pub num_cameras: usize,
    pub num_landmarks: usize,
}

/// Per-variable tangent updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub cameras: Vec<Twist>,
    pub landmarks: Vec<Twist>,
}

impl Delta {
    pub fn get(&self, key: VariableKey) -> Option<&Twist> {
        match key.kind {
            VariableKind::CameraExtrinsic => self.cameras.get(key.index),
            VariableKind::Landmark => self.landmarks.get(key.index),
        }
    }

    /// Stacked vector in camera-then-landmark order.
    pub fn to_dvector(&self) -> DVector<f64> {
        let n = self.cameras.len() + self.landmarks.len();
        let mut v = DVector::zeros(6 * n);
        for (i, t) in self.cameras.iter().chain(&self.landmarks).enumerate() {
            v.fixed_rows_mut::<6>(6 * i).copy_from(&t.to_vector());
        }
        v
    }

    fn from_dvector(v: &DVector<f64>, num_cameras: usize, num_landmarks: usize) -> Delta {
        let twist = |i: usize| Twist::from_vector(&v.fixed_rows::<6>(6 * i).into_owned());
        Delta {
            cameras: (0..num_cameras).map(twist).collect(),
            landmarks: (num_cameras..num_cameras + num_landmarks).map(twist).collect(),
        }
    }
}

impl LinearSystem {
    pub fn dim(&self) -> usize {
        6 * (self.num_cameras + self.num_landmarks)
    }

    /// `‖b‖²`, equal to the nonlinear cost at the linearization point.
    pub fn cost(&self) -> f64 {
        self.factors.iter().map(|f| f.residual.norm_squared()).sum()
    }

    fn column(&self, key: VariableKey) -> usize {
        match key.kind {
            VariableKind::CameraExtrinsic => 6 * key.index,
            VariableKind::Landmark => 6 * (self.num_cameras + key.index),
        }
    }

    /// Dense `A` (6F × dim) and `b` (6F).
    pub fn dense_jacobian(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows = 6 * self.factors.len();
        let mut a = DMatrix::zeros(rows, self.dim());
        let mut b = DVector::zeros(rows);
        for (i, f) in self.factors.iter().enumerate() {
            for (key, block) in &f.blocks {
                a.fixed_view_mut::<6, 6>(6 * i, self.column(*key)).copy_from(block);
            }
            b.fixed_rows_mut::<6>(6 * i).copy_from(&f.residual);
        }
        (a, b)
    }

    /// Predicted cost `‖A δ + b‖²` of the local quadratic model.
    pub fn model_cost(&self, delta: &Delta) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let mut r = f.residual;
                for (key, block) in &f.blocks {
                    r += block * delta.get(*key).expect("delta covers system").to_vector();
                }
                r.norm_squared()
            })
            .sum()
    }

    /// Writes `[A | b]` as Matrix Market coordinate triplets (1-based); the
    /// last column holds `b`.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        let rows = 6 * self.factors.len();
        let cols = self.dim() + 1;
        let mut entries = Vec::new();
        for (i, f) in self.factors.iter().enumerate() {
            for (key, block) in &f.blocks {
                let c0 = self.column(*key);
                for r in 0..6 {
                    for c in 0..6 {
                        let v = block[(r, c)];
                        if v != 0.0 {
                            entries.push((6 * i + r + 1, c0 + c + 1, v));
                        }
                    }
                }
            }
            for r in 0..6 {
                if f.residual[r] != 0.0 {
                    entries.push((6 * i + r + 1, cols, f.residual[r]));
                }
            }
        }
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(
            w,
            "% whitened [A | b]: {} cameras, {} landmarks, cameras first, (omega, rho) per block",
            self.num_cameras, self.num_landmarks
        )?;
        writeln!(w, "{rows} {cols} {}", entries.len())?;
        for (r, c, v) in entries {
            writeln!(w, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

/// Linearizes every factor at `values`.
pub fn linearize(graph: &FactorGraph, values: &Values, exec: Execution) -> Result<LinearSystem, SolverError> {
    graph.check_values(values)?;
    let results = map_range(exec, graph.num_factors(), |i| -> Result<LinearizedFactor, SolverError> {
        match graph.factor_id(i) {
            FactorId::Prior(p) => {
                let f = &graph.priors()[p];
                let x = values.get(f.target).expect("checked");
                let (residual, jac) = f.linearize(x).map_err(|e| graph.angle_error(i, e))?;
                Ok(LinearizedFactor {
                    blocks: vec![(f.target, jac)],
                    residual,
                })
            }
            FactorId::Relative(r) => {
                let f = &graph.relatives()[r];
                let lin = f
                    .linearize(&values.cameras[f.from.index], &values.landmarks[f.to.index])
                    .map_err(|e| graph.angle_error(i, e))?;
                Ok(LinearizedFactor {
                    blocks: vec![(f.from, lin.d_camera), (f.to, lin.d_landmark)],
                    residual: lin.residual,
                })
            }
        }
    });
    let factors = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(LinearSystem {
        factors,
        num_cameras: graph.num_cameras(),
        num_landmarks: graph.num_landmarks(),
    })
}

/// Normal-equation contributions of one landmark and the factors touching it.
struct LandmarkBlock {
    /// `H_ll⁻¹`
    hll_inv: Matrix6<f64>,
    /// `g_l = A_lᵀ b`
    gl: Vector6<f64>,
    /// `(camera, H_cl)` pairs, one per observing camera, ascending camera index.
    coupling: Vec<(usize, Matrix6<f64>)>,
    /// `(camera, H_cc part, g_c part)` from this landmark's relative factors.
    camera_terms: Vec<(usize, Matrix6<f64>, Vector6<f64>)>,
}

/// Factor indices grouped by landmark; factors touching no landmark go last.
fn group_by_landmark(sys: &LinearSystem) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut per_landmark = vec![Vec::new(); sys.num_landmarks];
    let mut camera_only = Vec::new();
    for (i, f) in sys.factors.iter().enumerate() {
        match f.blocks.iter().find(|(k, _)| k.kind == VariableKind::Landmark) {
            Some((k, _)) => per_landmark[k.index].push(i),
            None => camera_only.push(i),
        }
    }
    (per_landmark, camera_only)
}

fn landmark_block(
    sys: &LinearSystem,
    landmark: usize,
    factors: &[usize],
    lambda: f64,
) -> Result<LandmarkBlock, SolverError> {
    let mut hll = Matrix6::identity() * lambda;
    let mut gl = Vector6::zeros();
    let mut coupling: Vec<(usize, Matrix6<f64>)> = Vec::new();
    let mut camera_terms: Vec<(usize, Matrix6<f64>, Vector6<f64>)> = Vec::new();
    for &i in factors {
        let f = &sys.factors[i];
        let a_l = f
            .blocks
            .iter()
            .find(|(k, _)| k.kind == VariableKind::Landmark)
            .map(|(_, b)| b)
            .expect("grouped by landmark");
        hll += a_l.transpose() * a_l;
        gl += a_l.transpose() * f.residual;
        for (key, a_c) in f.blocks.iter().filter(|(k, _)| k.kind == VariableKind::CameraExtrinsic) {
            let c = key.index;
            let hcl = a_c.transpose() * a_l;
            match coupling.iter_mut().find(|(cc, _)| *cc == c) {
                Some((_, m)) => *m += hcl,
                None => coupling.push((c, hcl)),
            }
            camera_terms.push((c, a_c.transpose() * a_c, a_c.transpose() * f.residual));
        }
    }
    coupling.sort_by_key(|(c, _)| *c);
    let hll_inv = hll
        .cholesky()
        .ok_or_else(|| {
            SolverError::IndefiniteSystem(format!(
                "landmark L{landmark} block is not positive definite (missing prior?)"
            ))
        })?
        .inverse();
    Ok(LandmarkBlock {
        hll_inv,
        gl,
        coupling,
        camera_terms,
    })
}

/// Reduced camera system `S` and its right-hand side, plus the landmark blocks.
struct Reduced {
    s: DMatrix<f64>,
    rhs: DVector<f64>,
    blocks: Vec<LandmarkBlock>,
}

fn reduce(sys: &LinearSystem, lambda: f64, exec: Execution) -> Result<Reduced, SolverError> {
    let m = sys.num_cameras;
    let (per_landmark, camera_only) = group_by_landmark(sys);
    let blocks = map_range(exec, sys.num_landmarks, |l| {
        landmark_block(sys, l, &per_landmark[l], lambda)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut s = DMatrix::identity(6 * m, 6 * m) * lambda;
    let mut rhs = DVector::zeros(6 * m);
    for &i in &camera_only {
        let f = &sys.factors[i];
        for (ka, a) in &f.blocks {
            let mut seg = rhs.fixed_rows_mut::<6>(6 * ka.index);
            seg -= a.transpose() * f.residual;
            for (kb, b) in &f.blocks {
                let mut view = s.fixed_view_mut::<6, 6>(6 * ka.index, 6 * kb.index);
                view += a.transpose() * b;
            }
        }
    }
    // sequential reduction keeps results independent of thread scheduling
    for blk in &blocks {
        for (c, hcc, gc) in &blk.camera_terms {
            let mut view = s.fixed_view_mut::<6, 6>(6 * c, 6 * c);
            view += hcc;
            let mut seg = rhs.fixed_rows_mut::<6>(6 * c);
            seg -= gc;
        }
        let y = blk.hll_inv * blk.gl;
        for (ca, hca) in &blk.coupling {
            let t = hca * blk.hll_inv;
            let mut seg = rhs.fixed_rows_mut::<6>(6 * ca);
            seg += hca * y;
            for (cb, hcb) in &blk.coupling {
                let mut view = s.fixed_view_mut::<6, 6>(6 * ca, 6 * cb);
                view -= t * hcb.transpose();
            }
        }
    }
    Ok(Reduced { s, rhs, blocks })
}

fn unconstrained_cameras(sys: &LinearSystem) -> Vec<usize> {
    let mut seen = vec![false; sys.num_cameras];
    for f in &sys.factors {
        for (k, _) in &f.blocks {
            if k.kind == VariableKind::CameraExtrinsic {
                seen[k.index] = true;
            }
        }
    }
    seen.iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(i, _)| i)
        .collect()
}

fn indefinite(sys: &LinearSystem) -> SolverError {
    let missing = unconstrained_cameras(sys);
    if missing.is_empty() {
        SolverError::IndefiniteSystem("reduced camera system is not positive definite".into())
    } else {
        let names: Vec<String> = missing.iter().map(|c| format!("X{c}")).collect();
        SolverError::IndefiniteSystem(format!(
            "camera(s) {} have no constraints",
            names.join(", ")
        ))
    }
}

/// Solves `(AᵀA + λI) δ = -Aᵀb` by eliminating landmarks, factorizing the
/// 6M×6M reduced camera system and back-substituting.
pub fn solve_normal_equations(sys: &LinearSystem, lambda: f64, exec: Execution) -> Result<Delta, SolverError> {
    let reduced = reduce(sys, lambda, exec)?;
    let dc = if sys.num_cameras == 0 {
        DVector::zeros(0)
    } else {
        let chol = reduced.s.clone().cholesky().ok_or_else(|| indefinite(sys))?;
        chol.solve(&reduced.rhs)
    };
    if dc.iter().any(|v| !v.is_finite()) {
        return Err(indefinite(sys));
    }
    let cameras: Vec<Twist> = (0..sys.num_cameras)
        .map(|c| Twist::from_vector(&dc.fixed_rows::<6>(6 * c).into_owned()))
        .collect();
    let landmarks = map_range(exec, reduced.blocks.len(), |l| {
        let blk = &reduced.blocks[l];
        let mut r = -blk.gl;
        for (c, hcl) in &blk.coupling {
            r -= hcl.transpose() * cameras[*c].to_vector();
        }
        Twist::from_vector(&(blk.hll_inv * r))
    });
    Ok(Delta { cameras, landmarks })
}

/// Whole-system dense solve of the same normal equations, used as an oracle.
pub fn solve_dense(sys: &LinearSystem, lambda: f64) -> Result<Delta, SolverError> {
    let (a, b) = sys.dense_jacobian();
    let h = a.transpose() * &a + DMatrix::identity(sys.dim(), sys.dim()) * lambda;
    let g = a.transpose() * b;
    let chol = h.cholesky().ok_or_else(|| indefinite(sys))?;
    let d = chol.solve(&(-g));
    Ok(Delta::from_dvector(&d, sys.num_cameras, sys.num_landmarks))
}

/// Marginal covariances (6×6 blocks of `(AᵀA)⁻¹`) for the requested keys.
pub fn marginal_covariances(
    sys: &LinearSystem,
    keys: &[VariableKey],
    exec: Execution,
) -> Result<Vec<Matrix6<f64>>, SolverError> {
    let reduced = reduce(sys, 0.0, exec)?;
    let s_inv = if sys.num_cameras == 0 {
        DMatrix::zeros(0, 0)
    } else {
        reduced.s.clone().cholesky().ok_or_else(|| indefinite(sys))?.inverse()
    };
    keys.iter()
        .map(|key| match key.kind {
            VariableKind::CameraExtrinsic => {
                if key.index >= sys.num_cameras {
                    return Err(SolverError::MissingEstimate(*key));
                }
                Ok(s_inv.fixed_view::<6, 6>(6 * key.index, 6 * key.index).into_owned())
            }
            VariableKind::Landmark => {
                let blk = reduced
                    .blocks
                    .get(key.index)
                    .ok_or(SolverError::MissingEstimate(*key))?;
                // H_ll⁻¹ + H_ll⁻¹ H_lc S⁻¹ H_cl H_ll⁻¹
                let mut inner = Matrix6::zeros();
                for (ca, hca) in &blk.coupling {
                    for (cb, hcb) in &blk.coupling {
                        let sab: Matrix6<f64> = s_inv.fixed_view::<6, 6>(6 * ca, 6 * cb).into_owned();
                        inner += hca.transpose() * sab * hcb;
                    }
                }
                Ok(blk.hll_inv + blk.hll_inv * inner * blk.hll_inv)
            }
        })
        .collect()
}

/// Marginal covariance of one variable at `values`.
pub fn marginal_covariance(
    graph: &FactorGraph,
    values: &Values,
    key: VariableKey,
) -> Result<Matrix6<f64>, SolverError> {
    let exec = Execution::default();
    let sys = linearize(graph, values, exec)?;
    Ok(marginal_covariances(&sys, &[key], exec)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{sqrt_information, PriorFactor, RelativePoseFactor};
    use crate::lie::{exp, retract, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut impl Rng, scale: f64) -> Twist {
        Twist::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-scale..scale)))
    }

    fn random_spd(rng: &mut impl Rng) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() * 0.05 + Matrix6::identity() * 0.01
    }

    /// Random graph: every landmark has a prior, every camera at least one detection.
    fn random_problem(rng: &mut impl Rng, m: usize, n: usize) -> (FactorGraph, Values) {
        let cams: Vec<Pose> = (0..m).map(|_| exp(&random_twist(rng, 1.0))).collect();
        let lms: Vec<Pose> = (0..n).map(|_| exp(&random_twist(rng, 1.0))).collect();
        let mut g = FactorGraph::with_variables(m, n);
        for (l, lm) in lms.iter().enumerate() {
            let cov = random_spd(rng);
            let meas = retract(lm, &random_twist(rng, 0.05));
            g.add_prior(PriorFactor::new(VariableKey::landmark(l), meas, &cov).unwrap());
        }
        for l in 0..n {
            for (c, cam) in cams.iter().enumerate() {
                if l % m == c || rng.random_bool(0.4) {
                    let z = retract(&cam.inverse().compose(&lms[l]), &random_twist(rng, 0.05));
                    let s = sqrt_information(&random_spd(rng)).unwrap();
                    g.add_relative(
                        RelativePoseFactor::with_sqrt_info(VariableKey::camera(c), VariableKey::landmark(l), z, s)
                            .unwrap(),
                    );
                }
            }
        }
        let init = Values::new(
            cams.iter().map(|p| retract(p, &random_twist(rng, 0.1))).collect(),
            lms.iter().map(|p| retract(p, &random_twist(rng, 0.1))).collect(),
        );
        (g, init)
    }

    #[test]
    fn prior_at_measurement_gives_zero_rhs() {
        let mut g = FactorGraph::new();
        let p = exp(&Twist::new(nalgebra::Vector3::new(0.1, 0.2, 0.3), nalgebra::Vector3::new(1.0, 0.0, 0.0)));
        g.add_prior(PriorFactor::new(VariableKey::landmark(0), p, &Matrix6::identity()).unwrap());
        let sys = linearize(&g, &Values::new(vec![], vec![p]), Execution::Sequential).unwrap();
        assert!(sys.factors[0].residual.amax() < 1e-15);
    }

    #[test]
    fn system_cost_equals_graph_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (g, v) = random_problem(&mut rng, 2, 7);
        let sys = linearize(&g, &v, Execution::Sequential).unwrap();
        assert!((sys.cost() - g.cost(&v).unwrap()).abs() < 1e-12 * sys.cost());
    }

    #[test]
    fn schur_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..50 {
            let m = rng.random_range(1..=3);
            let n = rng.random_range(1..=(33 - m).min(20));
            let (g, v) = random_problem(&mut rng, m, n);
            let sys = linearize(&g, &v, Execution::Parallel).unwrap();
            let lambda = if i % 2 == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
            let a = solve_normal_equations(&sys, lambda, Execution::Parallel).unwrap();
            let b = solve_dense(&sys, lambda).unwrap();
            assert!((a.to_dvector() - b.to_dvector()).amax() <= 1e-8);
        }
    }

    #[test]
    fn execution_modes_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (g, v) = random_problem(&mut rng, 2, 40);
        let s1 = linearize(&g, &v, Execution::Sequential).unwrap();
        let s2 = linearize(&g, &v, Execution::Parallel).unwrap();
        let a = solve_normal_equations(&s1, 0.0, Execution::Sequential).unwrap();
        let b = solve_normal_equations(&s2, 0.0, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unconstrained_camera_is_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (mut g, mut v) = random_problem(&mut rng, 1, 3);
        g = {
            let mut g2 = FactorGraph::with_variables(2, g.num_landmarks());
            for p in g.priors() {
                g2.add_prior(p.clone());
            }
            for r in g.relatives() {
                g2.add_relative(r.clone());
            }
            g2
        };
        v.cameras.push(Pose::identity());
        let sys = linearize(&g, &v, Execution::Sequential).unwrap();
        match solve_normal_equations(&sys, 0.0, Execution::Sequential) {
            Err(SolverError::IndefiniteSystem(msg)) => assert!(msg.contains("X1"), "{msg}"),
            other => panic!("expected IndefiniteSystem, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_model_predicts_decrease() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for _ in 0..10 {
            let (g, v) = random_problem(&mut rng, 2, 6);
            let sys = linearize(&g, &v, Execution::Sequential).unwrap();
            // small damped step
            let delta = solve_normal_equations(&sys, 10.0, Execution::Sequential).unwrap();
            let predicted = sys.cost() - sys.model_cost(&delta);
            let actual = sys.cost() - g.cost(&v.retract(&delta)).unwrap();
            assert!(predicted > 0.0);
            assert!((actual - predicted).abs() <= 0.1 * predicted, "{actual} vs {predicted}");
        }
    }

    #[test]
    fn marginals_of_priors() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let s1 = random_spd(&mut rng);
        let s2 = random_spd(&mut rng);
        let p = exp(&random_twist(&mut rng, 1.0));
        let mut g = FactorGraph::new();
        g.add_prior(PriorFactor::new(VariableKey::landmark(0), p, &s1).unwrap());
        let v = Values::new(vec![], vec![p]);
        let m1 = marginal_covariance(&g, &v, VariableKey::landmark(0)).unwrap();
        assert!((m1 - s1).amax() < 1e-9 * s1.amax());

        g.add_prior(PriorFactor::new(VariableKey::landmark(0), p, &s2).unwrap());
        let m2 = marginal_covariance(&g, &v, VariableKey::landmark(0)).unwrap();
        let expected = (s1.try_inverse().unwrap() + s2.try_inverse().unwrap())
            .try_inverse()
            .unwrap();
        assert!((m2 - expected).amax() < 1e-9 * expected.amax());
    }

    #[test]
    fn marginals_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (g, v) = random_problem(&mut rng, 2, 5);
        let sys = linearize(&g, &v, Execution::Sequential).unwrap();
        let (a, _) = sys.dense_jacobian();
        let full = (a.transpose() * &a).try_inverse().unwrap();
        let keys = [VariableKey::camera(1), VariableKey::landmark(3)];
        let m = marginal_covariances(&sys, &keys, Execution::Sequential).unwrap();
        let c1: Matrix6<f64> = full.fixed_view::<6, 6>(6, 6).into_owned();
        let l3: Matrix6<f64> = full.fixed_view::<6, 6>(6 * (2 + 3), 6 * (2 + 3)).into_owned();
        assert!((m[0] - c1).amax() < 1e-9 * c1.amax());
        assert!((m[1] - l3).amax() < 1e-9 * l3.amax());
    }

    #[test]
    fn matrix_market_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let (g, v) = random_problem(&mut rng, 1, 2);
        let sys = linearize(&g, &v, Execution::Sequential).unwrap();
        let mut out = Vec::new();
        sys.write_matrix_market(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('%'));
        let header: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(header[0], 6 * sys.factors.len());
        assert_eq!(header[1], sys.dim() + 1);
        assert_eq!(header[2], lines.count());
    }
}
