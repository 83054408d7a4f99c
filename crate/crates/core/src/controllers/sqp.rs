//! Gauss-Newton SQP for condensed horizon problems.
//!
//! A problem exposes a decision vector with box bounds, at most one linear
//! inequality row, and a cost `|r(z)|^2 + c'z`. Each iteration builds the
//! Gauss-Newton model `2 J'J`, solves the bounded QP for a step and
//! backtracks on the cost. Iterates stay feasible throughout.

use super::qp::box_qp_with_row;
use super::ControlError;
use crate::dynamics::{linearize, step, ControlInput, InputMatrix, ModelParams, QuadState, StateMatrix, INPUT_DIM, STATE_DIM};
use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Projected-gradient (stationarity) tolerance.
    pub stationarity_tol: f64,
    /// Feasibility tolerance of the bound and row constraints.
    pub constraint_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            stationarity_tol: 1e-6,
            constraint_tol: 1e-8,
            max_iterations: 50,
        }
    }
}

pub(crate) struct Evaluation {
    pub residuals: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
}

pub(crate) trait LeastSquaresProblem {
    fn lower(&self) -> &DVector<f64>;
    fn upper(&self) -> &DVector<f64>;
    /// Constant gradient `c` of the linear cost part.
    fn linear(&self) -> &DVector<f64>;
    /// Optional row `a . z <= b`.
    fn row(&self) -> Option<(&DVector<f64>, f64)>;
    fn evaluate(&self, z: &DVector<f64>, jacobian: bool) -> Result<Evaluation, ControlError>;
}

#[derive(Debug, Clone)]
pub(crate) struct SqpOutcome {
    pub z: DVector<f64>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn cost_of(p: &dyn LeastSquaresProblem, z: &DVector<f64>, e: &Evaluation) -> f64 {
    e.residuals.norm_squared() + p.linear().dot(z)
}

/// Largest projected-gradient component, with the row multiplier folded in.
pub(crate) fn projected_gradient(
    z: &DVector<f64>,
    grad: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> f64 {
    (0..z.len())
        .map(|i| ((z[i] - grad[i]).clamp(lo[i], hi[i]) - z[i]).abs())
        .fold(0.0, f64::max)
}

/// Pulls `z` into the bounds and scales down the row if it is violated.
pub(crate) fn make_feasible(p: &dyn LeastSquaresProblem, z: &mut DVector<f64>) {
    let (lo, hi) = (p.lower(), p.upper());
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
    if let Some((a, b)) = p.row() {
        let excess = a.dot(z) - b;
        if excess > 0.0 {
            // Shrink the components that the row weighs toward their lower bounds.
            let room: f64 = (0..z.len()).map(|i| a[i] * (z[i] - lo[i])).sum();
            if room > 0.0 {
                let keep = (1.0 - excess / room).max(0.0);
                for i in 0..z.len() {
                    if a[i] != 0.0 {
                        z[i] = lo[i] + (z[i] - lo[i]) * keep;
                    }
                }
            }
        }
    }
}

pub(crate) fn solve(
    p: &dyn LeastSquaresProblem,
    z0: DVector<f64>,
    options: &SolverOptions,
) -> Result<SqpOutcome, ControlError> {
    let (lo, hi) = (p.lower().clone(), p.upper().clone());
    let n = lo.len();
    let mut z = z0;
    make_feasible(p, &mut z);
    let mut eval = p.evaluate(&z, true)?;
    let mut cost = cost_of(p, &z, &eval);
    let mut multiplier = 0.0;
    let mut damping = 1e-9;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..options.max_iterations {
        let jac = eval.jacobian.as_ref().expect("evaluated with jacobian");
        let grad = jac.tr_mul(&eval.residuals) * 2.0 + p.linear();
        let lagrangian_grad = match p.row() {
            Some((a, _)) => &grad + a * multiplier,
            None => grad.clone(),
        };
        kkt = projected_gradient(&z, &lagrangian_grad, &lo, &hi);
        if kkt <= options.stationarity_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let jt = jac.transpose();
        let mut hess = &jt * jac * 2.0;
        let diag_scale = (0..n).map(|i| hess[(i, i)]).fold(1.0, f64::max);
        for i in 0..n {
            hess[(i, i)] += damping * diag_scale;
        }
        let step_lo = &lo - &z;
        let step_hi = &hi - &z;
        let row = p.row().map(|(a, b)| (a, b - a.dot(&z)));
        let qp = box_qp_with_row(&hess, &grad, &step_lo, &step_hi, &DVector::zeros(n), row);
        let d = qp.x;
        let slope = grad.dot(&d);

        let mut t = 1.0;
        let mut accepted = None;
        if slope < 0.0 {
            while t > 1e-10 {
                let mut trial = &z + &d * t;
                // Guard against rounding past the bounds.
                for i in 0..n {
                    trial[i] = trial[i].clamp(lo[i], hi[i]);
                }
                if let Ok(e) = p.evaluate(&trial, false) {
                    let c = cost_of(p, &trial, &e);
                    if c <= cost + 1e-4 * t * slope {
                        accepted = Some((trial, c));
                        break;
                    }
                }
                t *= 0.5;
            }
        }
        match accepted {
            Some((trial, c)) => {
                // Row multiplier from the QP is only meaningful for a full step.
                multiplier = if t == 1.0 { qp.multiplier } else { multiplier };
                let improvement = cost - c;
                z = trial;
                cost = c;
                eval = p.evaluate(&z, true)?;
                damping = (damping * 0.3).max(1e-12);
                if improvement <= 1e-14 * (1.0 + cost.abs()) && t == 1.0 {
                    // Stalled at rounding level; report the true stationarity.
                    let jac = eval.jacobian.as_ref().unwrap();
                    let g = jac.tr_mul(&eval.residuals) * 2.0 + p.linear();
                    let lg = match p.row() {
                        Some((a, _)) => &g + a * multiplier,
                        None => g,
                    };
                    kkt = projected_gradient(&z, &lg, &lo, &hi);
                    converged = kkt <= options.stationarity_tol;
                    break;
                }
            }
            None => {
                if damping > 1e6 {
                    break;
                }
                damping *= 100.0;
            }
        }
    }
    if !converged && iterations == options.max_iterations {
        let jac = eval.jacobian.as_ref().unwrap();
        let g = jac.tr_mul(&eval.residuals) * 2.0 + p.linear();
        let lg = match p.row() {
            Some((a, _)) => &g + a * multiplier,
            None => g,
        };
        kkt = projected_gradient(&z, &lg, &lo, &hi);
        converged = kkt <= options.stationarity_tol;
    }
    Ok(SqpOutcome {
        z,
        cost,
        kkt_residual: kkt,
        iterations,
        converged,
    })
}

pub(crate) type Sensitivity = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Predicted states over the horizon and their sensitivities to the inputs.
pub(crate) struct HorizonRollout {
    pub states: Vec<QuadState>,
    /// `sens[k][j] = d x_k / d u_j` for `j < k`.
    pub sens: Vec<Vec<Sensitivity>>,
}

impl HorizonRollout {
    pub fn new(
        x0: &QuadState,
        inputs: &[ControlInput],
        model: &ModelParams,
        with_sensitivities: bool,
    ) -> Result<Self, ControlError> {
        let n = inputs.len();
        let mut states = Vec::with_capacity(n + 1);
        states.push(*x0);
        let mut sens: Vec<Vec<Sensitivity>> = Vec::with_capacity(n + 1);
        sens.push(Vec::new());
        for k in 0..n {
            let next = step(&states[k], &inputs[k], model)?;
            if with_sensitivities {
                let (a, b): (StateMatrix, InputMatrix) = linearize(&states[k], &inputs[k], model)?;
                let mut row: Vec<Sensitivity> = sens[k].iter().map(|s| a * s).collect();
                row.push(b);
                sens.push(row);
            }
            states.push(next);
        }
        Ok(Self { states, sens })
    }
}
