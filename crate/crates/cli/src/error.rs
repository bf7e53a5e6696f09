use legcal::graph::SolverError;
use legcal::io::IoError;
use legcal::{CalibrationError, SimError};
use serde::Serialize;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_VISIBLE_FRAMES: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_UNDERCONSTRAINED: i32 = 5;
pub const EXIT_NO_GROUND_TRUTH: i32 = 6;

/// A failure with its process exit code, printed as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn new(error: &'static str, exit_code: i32, message: impl Into<String>) -> Self {
        CliError {
            error,
            message: message.into(),
            exit_code,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("usage", EXIT_USAGE, message)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::new("io", EXIT_USAGE, e.to_string()),
            IoError::Parse { .. } => CliError::new("parse", EXIT_USAGE, e.to_string()),
            IoError::Invalid { .. } => CliError::new("invalid_input", EXIT_USAGE, e.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::IndefiniteSystem(_) => CliError::new("indefinite_system", EXIT_UNDERCONSTRAINED, e.to_string()),
            SolverError::InvalidSettings(_) => CliError::usage(e.to_string()),
            _ => CliError::new("solver", EXIT_FAILURE, e.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::UnobservedCamera(_) => CliError::new("unobserved_camera", EXIT_UNDERCONSTRAINED, e.to_string()),
            CalibrationError::MissingGroundTruth(_) => CliError::new("missing_ground_truth", EXIT_NO_GROUND_TRUTH, e.to_string()),
            CalibrationError::Solver(s) => s.into(),
            CalibrationError::EmptyProblem
            | CalibrationError::UnknownCamera { .. }
            | CalibrationError::Kinematics { .. }
            | CalibrationError::InvalidCovariance { .. }
            | CalibrationError::TooFewCameras(_) => CliError::new("invalid_input", EXIT_USAGE, e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NoVisibleFrames(_) => CliError::new("no_visible_frames", EXIT_NO_VISIBLE_FRAMES, e.to_string()),
            SimError::InvalidConfig(_) | SimError::Kinematics(_) => CliError::new("invalid_input", EXIT_USAGE, e.to_string()),
            SimError::Calibration(c) => c.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", EXIT_FAILURE, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new("io", EXIT_FAILURE, e.to_string())
    }
}
