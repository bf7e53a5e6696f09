//! Multi-camera extrinsic calibration for legged robots.
//!
//! Camera poses in the robot base frame are estimated jointly with the poses
//! of a fiducial marker mounted on a foot. Each marker observation becomes a
//! landmark variable tied to the base by leg forward kinematics (a unary
//! prior) and to every camera that saw it by the measured camera-to-marker
//! pose (a binary factor). The resulting nonlinear least-squares problem is
//! solved with Gauss-Newton on SE(3), eliminating landmarks through the Schur
//! complement so that only a small dense camera system is factorized.
//!
//! Crate layout:
//!
//! - [`lie`]: SO(3)/SE(3) groups, exp/log, perturbation Jacobians.
//! - [`kinematics`]: serial revolute chains, FK, FK Jacobian, covariance propagation.
//! - [`graph`]: factors, linearization, Schur-structured solver, marginals.
//! - [`pipeline`]: graph construction from datasets, calibration, evaluation.
//! - [`sim`]: synthetic scenarios and Monte Carlo studies.
//! - [`io`]: JSON/CSV file formats.
//! - [`selfcheck`]: embedded invariant suite.
//!
//! The `parallel` feature (on by default) runs per-landmark linearization and
//! Monte Carlo trials on rayon; without it every [`Execution`] mode runs
//! sequentially.

pub mod graph;
pub mod io;
pub mod kinematics;
pub mod lie;
mod par;
pub mod pipeline;
pub mod selfcheck;
pub mod sim;

pub use graph::{
    FactorGraph, PriorFactor, RelativePoseFactor, SolveReport, SolverError, SolverSettings,
    Termination, Values, VariableKey, VariableKind,
};
pub use kinematics::{JointSpec, JointState, KinematicChain, KinematicsError};
pub use lie::{LieError, Pose, Rotation, Twist};
pub use par::Execution;
pub use pipeline::{
    calibrate, CalibrationError, CalibrationProblem, CalibrationResult, Detection, ErrorStats, Frame,
};
pub use sim::{simulate, ScenarioConfig, SimError, SimulatedDataset};

