//! `legcal`: simulate, calibrate, evaluate and study multi-camera extrinsics
//! of a legged robot from the command line.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "legcal", version, about = "Multi-camera extrinsic calibration for legged robots")]
pub struct Cli {
    /// Random seed; overrides the seed stored in a scenario file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for Monte Carlo trials and linearization (default: all cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,

    /// Primary output file of the command.
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,

    /// Directory searched for `default_scenario.json` when no scenario is given.
    #[arg(long, global = true, env = "LEGCAL_CONFIG_DIR")]
    pub config_dir: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug). `RUST_LOG` takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from a scenario.
    Simulate {
        /// Scenario JSON; defaults to the config directory's scenario, then the built-in one.
        scenario: Option<PathBuf>,
    },
    /// Calibrate camera extrinsics from a dataset.
    Calibrate(CalibrateArgs),
    /// Score a calibration result against the dataset's ground truth.
    Evaluate { result: PathBuf, dataset: PathBuf },
    /// Monte Carlo noise sweep, or single-camera versus joint comparison.
    Study(StudyArgs),
    /// Run the built-in consistency checks.
    Selfcheck {
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    pub dataset: PathBuf,
    /// Gauss-Newton steps (the default).
    #[arg(long, conflicts_with = "lm")]
    pub gn: bool,
    /// Levenberg-Marquardt damping.
    #[arg(long)]
    pub lm: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iter: Option<u64>,
    /// Write the final linear system `[J | r]` in Matrix Market format.
    #[arg(long, value_name = "PATH")]
    pub dump_system: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    /// Compare each camera calibrated alone with all cameras calibrated together.
    #[arg(long)]
    pub compare_topologies: bool,
    /// Noise scale factors of the sweep, applied to every sigma of the scenario.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.5, 1.0, 2.0])]
    pub scales: Vec<f64>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).to_json_line());
            return ExitCode::from(error::EXIT_USAGE as u8);
        }
    };
    init_logging(cli.verbose);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code as u8)
        }
    }
}
