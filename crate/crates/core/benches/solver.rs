//! Sequential versus parallel execution of the hot paths.
//!
//! ```text
//! cargo bench -p legcal-core --bench solver
//! ```

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use legcal::graph::{linearize, solve_normal_equations};
use legcal::pipeline::build_graph;
use legcal::sim::{perturbation_study, simulate};
use legcal::{calibrate, Execution, ScenarioConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn full_scale_problem() -> legcal::CalibrationProblem {
    simulate(&ScenarioConfig::default_two_camera()).expect("default scenario simulates").problem
}

fn bench_calibrate(c: &mut Criterion) {
    let problem = full_scale_problem();
    let mut group = c.benchmark_group("calibrate_n1312");
    for (name, exec) in MODES {
        let mut p = problem.clone();
        p.settings.execution = exec;
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| calibrate(black_box(&p)).unwrap())
        });
    }
    group.finish();
}

fn bench_linear_algebra(c: &mut Criterion) {
    let problem = full_scale_problem();
    let built = build_graph(&problem).unwrap();
    let mut group = c.benchmark_group("linear_n1312");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("linearize", name), |b| {
            b.iter(|| linearize(black_box(&built.graph), &built.initial, exec).unwrap())
        });
        let sys = linearize(&built.graph, &built.initial, exec).unwrap();
        group.bench_function(BenchmarkId::new("schur_solve", name), |b| {
            b.iter(|| solve_normal_equations(black_box(&sys), 0.0, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_study(c: &mut Criterion) {
    let config = ScenarioConfig {
        n_frames: 300,
        duration_s: 80.0,
        ..ScenarioConfig::default_two_camera()
    };
    let mut group = c.benchmark_group("study_8_trials");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| perturbation_study(black_box(&config), &[1.0], 8, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_calibrate, bench_linear_algebra, bench_study);
criterion_main!(benches);
