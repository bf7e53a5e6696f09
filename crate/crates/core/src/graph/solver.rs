use serde::{Deserialize, Serialize};

use super::{linearize, solve_normal_equations, FactorGraph, SolverError, Values};
use crate::par::Execution;

/// Largest damping tried before giving up on a Levenberg-Marquardt step.
const MAX_LAMBDA: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub abs_cost_tol: f64,
    pub rel_cost_tol: f64,
    /// 0 selects pure Gauss-Newton.
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 50,
            abs_cost_tol: 1e-12,
            rel_cost_tol: 1e-9,
            initial_lambda: 0.0,
            lambda_up: 10.0,
            lambda_down: 0.1,
            execution: Execution::default(),
        }
    }
}

impl SolverSettings {
    pub fn gauss_newton() -> Self {
        Self::default()
    }

    pub fn levenberg_marquardt() -> Self {
        SolverSettings {
            initial_lambda: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidSettings(m.into()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.abs_cost_tol > 0.0 && self.rel_cost_tol > 0.0) {
            return bad("cost tolerances must be positive");
        }
        if !(self.initial_lambda >= 0.0 && self.initial_lambda.is_finite()) {
            return bad("initial_lambda must be finite and non-negative");
        }
        if self.initial_lambda > 0.0 && !(self.lambda_up > 1.0 && self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return bad("lambda_up must exceed 1 and lambda_down must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AbsoluteCostTolerance,
    RelativeCostTolerance,
    MaxIterations,
    DampingExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
}

/// Gauss-Newton (or Levenberg-Marquardt when `initial_lambda > 0`) on the graph.
///
/// Non-convergence is reported through [`SolveReport::converged`]; only an
/// indefinite system or a failed linearization is an error.
pub fn optimize(
    graph: &FactorGraph,
    initial: &Values,
    settings: &SolverSettings,
) -> Result<(Values, SolveReport), SolverError> {
    settings.validate()?;
    let exec = settings.execution;
    let mut values = initial.clone();
    let mut cost = graph.cost(&values)?;
    let initial_cost = cost;
    let mut lambda = settings.initial_lambda;
    let damped = lambda > 0.0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    'outer: while iterations < settings.max_iterations {
        iterations += 1;
        let sys = linearize(graph, &values, exec)?;
        let (candidate, new_cost) = loop {
            let step = solve_normal_equations(&sys, lambda, exec).and_then(|delta| {
                let next = values.retract(&delta);
                let c = graph.cost(&next)?;
                Ok((next, c))
            });
            if !damped {
                break step?;
            }
            match step {
                Ok((next, c)) if c <= cost => {
                    lambda = (lambda * settings.lambda_down).max(1e-15);
                    break (next, c);
                }
                Ok(_) | Err(SolverError::AngleNearPi { .. }) | Err(SolverError::IndefiniteSystem(_)) => {
                    lambda *= settings.lambda_up;
                    if lambda > MAX_LAMBDA {
                        termination = Termination::DampingExhausted;
                        break 'outer;
                    }
                }
                Err(e) => return Err(e),
            }
        };

        let decrease = cost - new_cost;
        let relative = if cost > 0.0 { decrease / cost } else { 0.0 };
        let finished = if decrease.abs() < settings.abs_cost_tol {
            Some(Termination::AbsoluteCostTolerance)
        } else if relative.abs() < settings.rel_cost_tol || (decrease > 0.0 && relative < settings.rel_cost_tol) {
            Some(Termination::RelativeCostTolerance)
        } else {
            None
        };
        // an uphill step is taken only while it is significant (plain Gauss-Newton);
        // at the noise floor the lower-cost iterate is kept
        if decrease >= 0.0 || finished.is_none() {
            values = candidate;
            cost = new_cost;
        }
        if let Some(t) = finished {
            termination = t;
            break;
        }
    }

    let converged = matches!(
        termination,
        Termination::AbsoluteCostTolerance | Termination::RelativeCostTolerance
    ) && cost <= initial_cost;
    log::debug!(
        "optimize: {iterations} iterations, cost {initial_cost:.6e} -> {cost:.6e}, {termination:?}"
    );
    Ok((
        values,
        SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            converged,
            termination,
        },
    ))
}
