use std::path::{Path, PathBuf};
use std::time::Instant;

use legcal::graph::SolverSettings;
use legcal::io::{self, DatasetFile, EvaluationFile, ResultFile};
use legcal::pipeline::{self, ErrorStats};
use legcal::selfcheck::{self, SelfCheckOptions};
use legcal::sim::{self, ScenarioConfig};
use legcal::Execution;

use crate::error::{CliError, EXIT_FAILURE, EXIT_NOT_CONVERGED, EXIT_NO_GROUND_TRUTH};
use crate::output::{csv_bytes, write_atomic, RunManifest};
use crate::{CalibrateArgs, Cli, Command, StudyArgs};

/// File looked up in the config directory when no scenario is passed.
pub const DEFAULT_SCENARIO_FILE: &str = "default_scenario.json";

/// Axis labels of every CSV table, carrying their unit.
const AXES: [&str; 6] = ["x_cm", "y_cm", "z_cm", "roll_deg", "pitch_deg", "yaw_deg"];

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (exec, jobs) = configure_jobs(cli.jobs)?;
    match &cli.command {
        Command::Simulate { scenario } => simulate(cli, scenario.as_deref(), jobs),
        Command::Calibrate(args) => calibrate(cli, args, exec, jobs),
        Command::Evaluate { result, dataset } => evaluate(cli, result, dataset, jobs),
        Command::Study(args) => study(cli, args, exec, jobs),
        Command::Selfcheck { corrupt_jacobian } => run_selfcheck(cli, *corrupt_jacobian),
    }
}

fn configure_jobs(requested: Option<u64>) -> Result<(Execution, usize), CliError> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let jobs = requested.map(|j| j as usize).unwrap_or(available);
    if jobs == 1 || !cfg!(feature = "parallel") {
        return Ok((Execution::Sequential, 1));
    }
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        log::debug!("rayon pool already configured: {e}");
    }
    Ok((Execution::Parallel, jobs))
}

/// Explicit path, else the config directory's default scenario, else the built-in one.
fn resolve_scenario(cli: &Cli, explicit: Option<&Path>) -> Result<(ScenarioConfig, Vec<PathBuf>), CliError> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => cli
            .config_dir
            .as_ref()
            .map(|d| d.join(DEFAULT_SCENARIO_FILE))
            .filter(|p| p.is_file()),
    };
    let (mut config, paths) = match path {
        Some(p) => (io::load_scenario(&p)?, vec![p]),
        None => {
            log::info!("using the built-in two-camera scenario");
            (ScenarioConfig::default_two_camera(), Vec::new())
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok((config, paths))
}

fn output_path(cli: &Cli, default: &str) -> PathBuf {
    cli.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn simulate(cli: &Cli, scenario: Option<&Path>, jobs: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let (config, config_paths) = resolve_scenario(cli, scenario)?;
    let data = sim::simulate(&config)?;
    let out = output_path(cli, "dataset.json");
    let file = DatasetFile::from_dataset(&data.problem, Some(&data.ground_truth));
    write_atomic(&out, io::to_json(&file).as_bytes())?;

    let mut manifest = RunManifest::new("simulate", config_paths, Some(config.seed), jobs);
    manifest.output_paths.push(out.clone());
    manifest.finish(start.elapsed())?;
    let detections: usize = data.problem.frames.iter().map(|f| f.detections.len()).sum();
    println!(
        "wrote {} ({} frames, {} detections, {} cameras)",
        out.display(),
        data.problem.frames.len(),
        detections,
        data.problem.cameras.len()
    );
    Ok(())
}

fn calibrate(cli: &Cli, args: &CalibrateArgs, exec: Execution, jobs: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let mut problem = io::load_dataset(&args.dataset)?.problem;
    let mut settings = if args.lm {
        SolverSettings::levenberg_marquardt()
    } else {
        SolverSettings::gauss_newton()
    };
    if let Some(n) = args.max_iter {
        settings.max_iterations = n as usize;
    }
    settings.execution = exec;
    problem.settings = settings;

    let solution = pipeline::solve(&problem)?;
    let result = &solution.result;
    let out = output_path(cli, "result.json");
    write_atomic(&out, io::to_json(&ResultFile::from(result)).as_bytes())?;

    let mut manifest = RunManifest::new("calibrate", vec![args.dataset.clone()], cli.seed, jobs);
    manifest.output_paths.push(out.clone());
    if let Some(path) = &args.dump_system {
        let mut bytes = Vec::new();
        solution.system.write_matrix_market(&mut bytes)?;
        write_atomic(path, &bytes)?;
        manifest.output_paths.push(path.clone());
    }
    manifest.finish(start.elapsed())?;

    let report = &result.report;
    println!(
        "{} after {} iterations: cost {:.6e} -> {:.6e}, {} frames used",
        if report.converged { "converged" } else { "stopped" },
        report.iterations,
        report.initial_cost,
        report.final_cost,
        result.n_frames_used
    );
    for ((name, pose), cov) in result.cameras.iter().zip(&result.extrinsics).zip(&result.marginals) {
        let t = pose.translation;
        println!(
            "  {name}: t = [{:.4}, {:.4}, {:.4}] m, sigma_t = [{:.2}, {:.2}, {:.2}] mm",
            t.x,
            t.y,
            t.z,
            cov[(3, 3)].max(0.0).sqrt() * 1e3,
            cov[(4, 4)].max(0.0).sqrt() * 1e3,
            cov[(5, 5)].max(0.0).sqrt() * 1e3
        );
    }
    if !report.converged {
        return Err(CliError::new(
            "not_converged",
            EXIT_NOT_CONVERGED,
            format!(
                "optimizer stopped after {} iterations ({:?}); partial result written to {}",
                report.iterations,
                report.termination,
                out.display()
            ),
        ));
    }
    Ok(())
}

/// Shortest round-trip text; scientific notation outside `[1e-4, 1e6)`.
fn fmt(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e6).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Six CSV cells per statistic: translation in centimetres, rotation in degrees.
fn stat_rows(stats: &ErrorStats) -> [(&'static str, String, String); 6] {
    let mae = [
        stats.translation_mae_m[0] * 100.0,
        stats.translation_mae_m[1] * 100.0,
        stats.translation_mae_m[2] * 100.0,
        stats.rotation_mae_deg[0],
        stats.rotation_mae_deg[1],
        stats.rotation_mae_deg[2],
    ];
    let std: Option<[f64; 6]> = stats.translation_std_m.zip(stats.rotation_std_deg).map(|(t, r)| {
        [t[0] * 100.0, t[1] * 100.0, t[2] * 100.0, r[0], r[1], r[2]]
    });
    std::array::from_fn(|i| (AXES[i], fmt(mae[i]), std.map(|s| fmt(s[i])).unwrap_or_default()))
}

fn evaluate(cli: &Cli, result_path: &Path, dataset_path: &Path, jobs: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let result = io::load_result(result_path)?;
    let dataset = io::load_dataset(dataset_path)?;
    let truth = dataset.ground_truth.ok_or_else(|| {
        CliError::new(
            "missing_ground_truth",
            EXIT_NO_GROUND_TRUTH,
            format!("{} has no ground_truth section", dataset_path.display()),
        )
    })?;
    let errors = pipeline::evaluate(&result, &truth)?;
    let file = EvaluationFile::new(&errors, &result.cameras);

    let out = output_path(cli, "evaluation.json");
    let csv_path = out.with_extension("csv");
    write_atomic(&out, io::to_json(&file).as_bytes())?;
    let rows = file.cameras.iter().flat_map(|cam| {
        stat_rows(&cam.stats)
            .into_iter()
            .map(|(axis, mae, std)| vec![cam.name.clone(), axis.to_string(), mae, std])
    });
    write_atomic(&csv_path, &csv_bytes(&["camera", "axis", "mae", "std"], rows)?)?;

    let mut manifest = RunManifest::new(
        "evaluate",
        vec![result_path.to_path_buf(), dataset_path.to_path_buf()],
        cli.seed,
        jobs,
    );
    manifest.output_paths.extend([out.clone(), csv_path]);
    manifest.finish(start.elapsed())?;

    for cam in &file.cameras {
        let t = cam.translation_error_m;
        let r = cam.rotation_error_deg;
        println!(
            "{}: translation [{:.3}, {:.3}, {:.3}] cm, rotation [{:.3}, {:.3}, {:.3}] deg",
            cam.name,
            t[0] * 100.0,
            t[1] * 100.0,
            t[2] * 100.0,
            r[0],
            r[1],
            r[2]
        );
    }
    Ok(())
}

fn study(cli: &Cli, args: &StudyArgs, exec: Execution, jobs: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let (config, config_paths) = resolve_scenario(cli, args.scenario.as_deref())?;
    let trials = args.trials as usize;
    let mut manifest = RunManifest::new("study", config_paths, Some(config.seed), jobs);

    if args.compare_topologies {
        let comparison = sim::topology_study(&config, trials, exec)?;
        let out = output_path(cli, "topology.csv");
        let mut rows = Vec::new();
        for (topology, stats) in [("single", &comparison.single), ("joint", &comparison.joint)] {
            for (name, s) in comparison.cameras.iter().zip(stats) {
                for (axis, mae, std) in stat_rows(s) {
                    rows.push(vec![topology.to_string(), name.clone(), axis.to_string(), mae, std]);
                }
            }
        }
        write_atomic(&out, &csv_bytes(&["topology", "camera", "axis", "mae", "std"], rows)?)?;
        manifest.output_paths.push(out.clone());
        manifest.finish(start.elapsed())?;

        let ratio = comparison.ratio.map(|r| format!("{r:.4}")).unwrap_or_else(|| "0/0".into());
        let st = comparison.sign_test;
        println!(
            "mean translation MAE: single {:.4} cm, joint {:.4} cm",
            comparison.single_translation_mae_m * 100.0,
            comparison.joint_translation_mae_m * 100.0
        );
        println!("joint/single ratio: {ratio}");
        println!(
            "sign test: {} wins, {} losses, {} ties, p = {:.3e}",
            st.wins, st.losses, st.ties, st.p_value
        );
        println!("wrote {}", out.display());
        return Ok(());
    }

    let rows = sim::perturbation_study(&config, &args.scales, trials, exec)?;
    let out = output_path(cli, "study.csv");
    let cells = rows.iter().flat_map(|row| {
        stat_rows(&row.stats)
            .into_iter()
            .map(|(axis, mae, std)| vec![fmt(row.scale), axis.to_string(), mae, std])
    });
    write_atomic(&out, &csv_bytes(&["sigma", "axis", "mae", "std"], cells)?)?;
    manifest.output_paths.push(out.clone());
    manifest.finish(start.elapsed())?;
    for row in &rows {
        println!(
            "scale {}: translation MAE {:.4} cm, rotation MAE {:.4} deg",
            row.scale,
            row.stats.mean_translation_mae_m() * 100.0,
            row.stats.mean_rotation_mae_deg()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_selfcheck(cli: &Cli, corrupt_jacobian: bool) -> Result<(), CliError> {
    let outcomes = selfcheck::run(&SelfCheckOptions {
        seed: cli.seed.unwrap_or(0),
        corrupt_jacobian,
    });
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{} {:<26} {:>8.3} s  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.elapsed.as_secs_f64(),
            o.detail
        );
        if !o.passed {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            "selfcheck_failed",
            EXIT_FAILURE,
            format!("failed checks: {}", failed.join(", ")),
        ))
    }
}
