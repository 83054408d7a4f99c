//! Model predictive contouring control and its on-policy variant.
//!
//! Both are condensed: the decision vector holds only the inputs and, for
//! contouring, the progress rate of every stage. States and the path
//! parameter follow from forward simulation.

use super::sqp::{solve, Evaluation, HorizonRollout, LeastSquaresProblem, SolverOptions};
use super::{config_error, Avoidance, ControlError, MpccSolution, MpccWeights, PolicyContext};
use crate::dynamics::{step, ControlInput, ModelParams, QuadState, INPUT_DIM, STATE_DIM};
use crate::geometry::SplinePath;
use crate::world::yaw_pd;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

pub(crate) enum Tracking<'a> {
    Path {
        path: &'a SplinePath,
        nu0: f64,
        contour: f64,
        lag: f64,
        /// Progress rate held constant instead of optimized.
        fixed_rate: Option<f64>,
    },
    /// Stage `k` (1-based) tracks `states[k - 1]` on position and planar velocity.
    Reference { states: &'a [QuadState], q: [f64; 5] },
}

pub(crate) struct HorizonProblem<'a> {
    pub x0: QuadState,
    pub model: &'a ModelParams,
    pub horizon: usize,
    pub tracking: Tracking<'a>,
    pub input_weights: [f64; INPUT_DIM],
    /// Inputs penalized as deviations from these, stage by stage.
    pub input_ref: Option<&'a [ControlInput]>,
    pub avoid: Option<&'a Avoidance>,
    /// Predicted policy states for stages `1..=N` and their weight.
    pub follow: Option<(&'a [QuadState], f64)>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    linear: DVector<f64>,
    row: Option<(DVector<f64>, f64)>,
}

impl<'a> HorizonProblem<'a> {
    /// `progress` holds the bounds of the progress rate and its linear
    /// reward; it must be given exactly when tracking a path.
    pub fn new(
        x0: QuadState,
        model: &'a ModelParams,
        horizon: usize,
        tracking: Tracking<'a>,
        input_weights: [f64; INPUT_DIM],
        progress: Option<(f64, f64, f64)>,
    ) -> Self {
        let nv = if progress.is_some() { INPUT_DIM + 1 } else { INPUT_DIM };
        let n = nv * horizon;
        let lim = model.input_limits.to_array();
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        let mut linear = DVector::zeros(n);
        let mut row = None;
        for k in 0..horizon {
            for i in 0..INPUT_DIM {
                lower[k * nv + i] = -lim[i];
                upper[k * nv + i] = lim[i];
            }
        }
        if let (Some((lo, hi, reward)), Tracking::Path { path, nu0, .. }) = (progress, &tracking) {
            let mut a = DVector::zeros(n);
            for k in 0..horizon {
                let i = k * nv + INPUT_DIM;
                lower[i] = lo;
                upper[i] = hi;
                linear[i] = -reward;
                a[i] = model.ts;
            }
            // Only needed when the fastest progress could run off the path end.
            let room = path.length() - nu0;
            if model.ts * hi * horizon as f64 > room {
                row = Some((a, room));
            }
        }
        Self {
            x0,
            model,
            horizon,
            tracking,
            input_weights,
            input_ref: None,
            avoid: None,
            follow: None,
            lower,
            upper,
            linear,
            row,
        }
    }

    fn stride(&self) -> usize {
        match self.tracking {
            Tracking::Path { fixed_rate: None, .. } => INPUT_DIM + 1,
            _ => INPUT_DIM,
        }
    }

    pub fn inputs(&self, z: &DVector<f64>) -> Vec<ControlInput> {
        let nv = self.stride();
        (0..self.horizon)
            .map(|k| ControlInput::from_slice(&z.as_slice()[k * nv..k * nv + INPUT_DIM]))
            .collect()
    }

    /// Path parameter at every stage, or empty when tracking a reference.
    pub fn progress(&self, z: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let Tracking::Path { nu0, fixed_rate, .. } = self.tracking else {
            return (Vec::new(), Vec::new());
        };
        let nv = self.stride();
        let rates: Vec<f64> = (0..self.horizon)
            .map(|k| fixed_rate.unwrap_or_else(|| z[k * nv + INPUT_DIM]))
            .collect();
        let mut nu = Vec::with_capacity(self.horizon + 1);
        nu.push(nu0);
        for r in &rates {
            nu.push(nu.last().unwrap() + self.model.ts * r);
        }
        (nu, rates)
    }

    pub fn pack(&self, inputs: &[ControlInput], rates: &[f64]) -> DVector<f64> {
        let nv = self.stride();
        let mut z = DVector::zeros(nv * self.horizon);
        for k in 0..self.horizon {
            let u = inputs[k.min(inputs.len() - 1)].to_array();
            for i in 0..INPUT_DIM {
                z[k * nv + i] = u[i];
            }
            if nv > INPUT_DIM {
                z[k * nv + INPUT_DIM] = rates[k.min(rates.len() - 1)];
            }
        }
        z
    }

    fn residual_count(&self) -> usize {
        let tracking = match self.tracking {
            Tracking::Path { .. } => 4,
            Tracking::Reference { .. } => 5,
        };
        let avoid = self.avoid.map_or(0, |a| a.obstacles.len());
        let follow = if self.follow.is_some() { STATE_DIM } else { 0 };
        self.horizon * (tracking + avoid + follow + INPUT_DIM)
    }
}

impl LeastSquaresProblem for HorizonProblem<'_> {
    fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    fn row(&self) -> Option<(&DVector<f64>, f64)> {
        self.row.as_ref().map(|(a, b)| (a, *b))
    }

    fn evaluate(&self, z: &DVector<f64>, with_jacobian: bool) -> Result<Evaluation, ControlError> {
        let nv = self.stride();
        let n = self.horizon;
        let ts = self.model.ts;
        let inputs = self.inputs(z);
        let (nu, _) = self.progress(z);
        let roll = HorizonRollout::new(&self.x0, &inputs, self.model, with_jacobian)?;
        let m = self.residual_count();
        let mut r = DVector::zeros(m);
        let mut jac = with_jacobian.then(|| DMatrix::zeros(m, nv * n));
        let mut row = 0;

        for k in 1..=n {
            let p = roll.states[k].position;
            match &self.tracking {
                Tracking::Path {
                    path,
                    contour,
                    lag,
                    fixed_rate,
                    ..
                } => {
                    let e = path.contouring_errors(&p, nu[k])?;
                    let (wc, wl) = (contour.sqrt(), lag.sqrt());
                    for i in 0..3 {
                        r[row + i] = wc * e.contour[i];
                    }
                    r[row + 3] = wl * e.lag;
                    if let Some(j) = jac.as_mut() {
                        for s in 0..k {
                            let sp = roll.sens[k][s].fixed_rows::<3>(0).into_owned();
                            let dc = e.d_contour_dp * sp * wc;
                            let dl = e.d_lag_dp.transpose() * sp * wl;
                            for c in 0..INPUT_DIM {
                                for i in 0..3 {
                                    j[(row + i, s * nv + c)] = dc[(i, c)];
                                }
                                j[(row + 3, s * nv + c)] = dl[(0, c)];
                            }
                            if fixed_rate.is_some() {
                                continue;
                            }
                            // Every earlier progress rate moves this stage's parameter.
                            let col = s * nv + INPUT_DIM;
                            for i in 0..3 {
                                j[(row + i, col)] = wc * e.d_contour_dnu[i] * ts;
                            }
                            j[(row + 3, col)] = wl * e.d_lag_dnu * ts;
                        }
                    }
                    row += 4;
                }
                Tracking::Reference { states, q } => {
                    let target = &states[k - 1];
                    let x = &roll.states[k];
                    let diff = [
                        x.position.x - target.position.x,
                        x.position.y - target.position.y,
                        x.position.z - target.position.z,
                        x.velocity.x - target.velocity.x,
                        x.velocity.y - target.velocity.y,
                    ];
                    for i in 0..5 {
                        r[row + i] = q[i].sqrt() * diff[i];
                    }
                    if let Some(j) = jac.as_mut() {
                        for s in 0..k {
                            let sens = &roll.sens[k][s];
                            for i in 0..5 {
                                for c in 0..INPUT_DIM {
                                    j[(row + i, s * nv + c)] = q[i].sqrt() * sens[(i, c)];
                                }
                            }
                        }
                    }
                    row += 5;
                }
            }

            if let Some(avoid) = self.avoid {
                let w = avoid.weight.sqrt();
                for obs in &avoid.obstacles {
                    let moved = obs.translated(obs.velocity * (k as f64 * ts));
                    let (dist, grad) = moved.distance_and_gradient(&p);
                    if dist < avoid.onset {
                        r[row] = w * (avoid.onset - dist);
                        if let Some(j) = jac.as_mut() {
                            for s in 0..k {
                                let sp = roll.sens[k][s].fixed_rows::<3>(0);
                                let d = grad.transpose() * sp * (-w);
                                for c in 0..INPUT_DIM {
                                    j[(row, s * nv + c)] = d[(0, c)];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }

            if let Some((targets, kf)) = self.follow {
                let w = kf.sqrt();
                let diff = roll.states[k].to_vector() - targets[k - 1].to_vector();
                for i in 0..STATE_DIM {
                    r[row + i] = w * diff[i];
                }
                if let Some(j) = jac.as_mut() {
                    for s in 0..k {
                        let sens = &roll.sens[k][s];
                        for i in 0..STATE_DIM {
                            for c in 0..INPUT_DIM {
                                j[(row + i, s * nv + c)] = w * sens[(i, c)];
                            }
                        }
                    }
                }
                row += STATE_DIM;
            }

            let u = inputs[k - 1].to_array();
            let u_ref = self.input_ref.map(|r| r[(k - 1).min(r.len() - 1)].to_array());
            for i in 0..INPUT_DIM {
                let w = self.input_weights[i].sqrt();
                r[row + i] = w * (u[i] - u_ref.map_or(0.0, |v| v[i]));
                if let Some(j) = jac.as_mut() {
                    j[(row + i, (k - 1) * nv + i)] = w;
                }
            }
            row += INPUT_DIM;
        }
        debug_assert_eq!(row, m);
        Ok(Evaluation { residuals: r, jacobian: jac })
    }
}

pub(crate) fn check_state(state: &QuadState, model: &ModelParams) -> Result<(), ControlError> {
    if !state.is_finite() {
        return config_error("initial state is not finite");
    }
    if !model.state_limits.clamp(state).to_vector().relative_eq(&state.to_vector(), 1e-9, 1e-9) {
        return config_error("initial state outside the admissible attitude set");
    }
    Ok(())
}

pub(crate) fn finish(
    problem: &HorizonProblem<'_>,
    z0: DVector<f64>,
    options: &SolverOptions,
    started: Instant,
) -> Result<MpccSolution, ControlError> {
    let out = solve(problem, z0, options)?;
    let inputs = problem.inputs(&out.z);
    let (nu, nu_rate) = problem.progress(&out.z);
    let states = HorizonRollout::new(&problem.x0, &inputs, problem.model, false)?.states;
    Ok(MpccSolution {
        states,
        inputs,
        nu,
        nu_rate,
        cost: out.cost,
        kkt_residual: out.kkt_residual,
        iterations: out.iterations,
        solve_time: started.elapsed().as_secs_f64(),
        converged: out.converged,
    })
}

fn path_problem<'a>(
    state: &QuadState,
    nu0: f64,
    path: &'a SplinePath,
    weights: &MpccWeights,
    model: &'a ModelParams,
) -> Result<HorizonProblem<'a>, ControlError> {
    weights.validate()?;
    model.validate()?;
    if !(0.0..=path.length()).contains(&nu0) {
        return config_error(format!("path parameter {nu0} outside [0, {}]", path.length()));
    }
    check_state(state, model)?;
    Ok(HorizonProblem::new(
        *state,
        model,
        weights.horizon,
        Tracking::Path {
            path,
            nu0,
            contour: weights.contour,
            lag: weights.lag,
            fixed_rate: None,
        },
        weights.input,
        Some((0.0, weights.max_progress_rate, weights.progress)),
    ))
}

fn initial_guess(
    problem: &HorizonProblem<'_>,
    state: &QuadState,
    nu0: f64,
    path: &SplinePath,
    max_rate: f64,
    warm: Option<&MpccSolution>,
) -> DVector<f64> {
    match warm {
        Some(w) if !w.inputs.is_empty() && !w.nu_rate.is_empty() => {
            let (u, r) = w.shifted();
            problem.pack(&u, &r)
        }
        _ => {
            let along = path
                .eval(nu0)
                .map(|f| f.tangent.xy().dot(&state.velocity))
                .unwrap_or(0.0);
            let rate = along.clamp(0.5 * max_rate, max_rate);
            problem.pack(&[ControlInput::default()], &[rate])
        }
    }
}

/// The problem `mpcc_solve` optimizes, for inspection: cost, gradient and
/// residual Jacobian at any decision vector. Per stage the decision vector
/// holds `[v_z, roll_d, pitch_d, yaw_rate_d, progress_rate]`.
pub struct MpccProblem<'a> {
    inner: HorizonProblem<'a>,
}

impl<'a> MpccProblem<'a> {
    pub fn new(
        state: &QuadState,
        nu0: f64,
        path: &'a SplinePath,
        weights: &MpccWeights,
        model: &'a ModelParams,
        avoid: Option<&'a Avoidance>,
    ) -> Result<Self, ControlError> {
        let mut inner = path_problem(state, nu0, path, weights, model)?;
        inner.avoid = avoid;
        Ok(Self { inner })
    }

    pub fn dim(&self) -> usize {
        self.inner.lower.len()
    }

    pub fn bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.inner.lower, &self.inner.upper)
    }

    /// The path-end row `a . z <= b`, when it can become active.
    pub fn progress_row(&self) -> Option<(&DVector<f64>, f64)> {
        self.inner.row()
    }

    pub fn pack(&self, inputs: &[ControlInput], rates: &[f64]) -> DVector<f64> {
        self.inner.pack(inputs, rates)
    }

    pub fn residuals(&self, z: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        Ok(self.inner.evaluate(z, false)?.residuals)
    }

    pub fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>, ControlError> {
        Ok(self.inner.evaluate(z, true)?.jacobian.expect("requested"))
    }

    pub fn cost(&self, z: &DVector<f64>) -> Result<f64, ControlError> {
        let r = self.residuals(z)?;
        Ok(r.norm_squared() + self.inner.linear.dot(z))
    }

    pub fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        let e = self.inner.evaluate(z, true)?;
        Ok(e.jacobian.expect("requested").tr_mul(&e.residuals) * 2.0 + &self.inner.linear)
    }
}

/// Contouring MPC from `state` at path parameter `nu0`. With `avoid`, adds
/// the soft obstacle hinge to every stage.
pub fn mpcc_solve(
    state: &QuadState,
    nu0: f64,
    path: &SplinePath,
    weights: &MpccWeights,
    model: &ModelParams,
    warm: Option<&MpccSolution>,
    avoid: Option<&Avoidance>,
) -> Result<MpccSolution, ControlError> {
    let started = Instant::now();
    let mut problem = path_problem(state, nu0, path, weights, model)?;
    problem.avoid = avoid;
    let z0 = initial_guess(&problem, state, nu0, path, weights.max_progress_rate, warm);
    finish(&problem, z0, &weights.solver, started)
}

/// Rolls the policy forward from `x0` for `n` stages, observing each
/// predicted state. Yaw follows the guidance heading through the yaw loop.
/// Returns the `n` predicted states after `x0`.
pub fn rollout_policy(
    x0: &QuadState,
    ctx: &PolicyContext<'_>,
    model: &ModelParams,
    n: usize,
) -> Result<Vec<QuadState>, ControlError> {
    let mut x = *x0;
    let mut vz = ctx.vz;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = ctx.time + k as f64 * model.ts;
        let obs = ctx.world.observe(&x, t, vz);
        let [uz, roll, pitch] = ctx.policy.act(&obs)?;
        let heading = ctx.world.setpoint(t).heading;
        let yaw_rate = yaw_pd(&x, heading, &ctx.yaw_gains, 0.0, model.input_limits.yaw_rate);
        let u = model.input_limits.clip(&ControlInput::new(uz, roll, pitch, yaw_rate));
        x = step(&x, &u, model)?;
        vz = u.vz;
        out.push(x);
    }
    Ok(out)
}

/// Contouring MPC with the added cost of straying from the policy's own
/// predicted rollout.
#[allow(clippy::too_many_arguments)]
pub fn onpolicy_mpcc_solve(
    state: &QuadState,
    nu0: f64,
    path: &SplinePath,
    weights: &MpccWeights,
    model: &ModelParams,
    ctx: &PolicyContext<'_>,
    warm: Option<&MpccSolution>,
) -> Result<MpccSolution, ControlError> {
    let started = Instant::now();
    let mut problem = path_problem(state, nu0, path, weights, model)?;
    let targets;
    if weights.follow > 0.0 {
        targets = rollout_policy(state, ctx, model, weights.horizon)?;
        problem.follow = Some((&targets, weights.follow));
    }
    let z0 = initial_guess(&problem, state, nu0, path, weights.max_progress_rate, warm);
    finish(&problem, z0, &weights.solver, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use nalgebra::Vector2;

    fn straight() -> SplinePath {
        SplinePath::line(Point3::new(0.0, 0.0, 1.0), Point3::new(20.0, 0.0, 1.0)).unwrap()
    }

    fn model() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let path = SplinePath::new(&[
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(4.0, 1.0, 1.2),
            Point3::new(8.0, -1.0, 1.0),
            Point3::new(12.0, 0.0, 1.5),
        ])
        .unwrap();
        let m = model();
        let mut x0 = QuadState::at(Point3::new(0.5, 0.4, 1.1), 0.2);
        x0.velocity = Vector2::new(0.8, 0.1);
        x0.roll = 0.1;
        let avoid = Avoidance::new(vec![crate::world::Obstacle::cylinder(2.0, 0.5, 0.2)]);
        let follow: Vec<QuadState> = (0..6).map(|k| QuadState::at(Point3::new(0.3 * k as f64, 0.1, 1.0), 0.1)).collect();
        let mut p = HorizonProblem::new(
            x0,
            &m,
            6,
            Tracking::Path {
                path: &path,
                nu0: 0.4,
                contour: 25.0,
                lag: 100.0,
                fixed_rate: None,
            },
            [0.1; 4],
            Some((0.0, 2.0, 1.0)),
        );
        p.avoid = Some(&avoid);
        p.follow = Some((&follow, 5.0));
        let z = DVector::from_fn(30, |i, _| if i % 5 == 4 { 1.1 } else { 0.07 * ((i * 7 % 11) as f64 - 5.0) / 5.0 });
        let e = p.evaluate(&z, true).unwrap();
        let j = e.jacobian.unwrap();
        let h = 1e-6;
        for c in 0..z.len() {
            let mut zp = z.clone();
            zp[c] += h;
            let mut zm = z.clone();
            zm[c] -= h;
            let fd = (p.evaluate(&zp, false).unwrap().residuals - p.evaluate(&zm, false).unwrap().residuals) / (2.0 * h);
            for r in 0..fd.len() {
                assert!((fd[r] - j[(r, c)]).abs() < 1e-5 * (1.0 + fd[r].abs()), "row {r} col {c}: {} vs {}", j[(r, c)], fd[r]);
            }
        }
    }

    #[test]
    fn aligned_on_straight_path_progresses_without_contour_error() {
        let path = straight();
        let mut x0 = QuadState::at(Point3::new(1.0, 0.0, 1.0), 0.0);
        x0.velocity = Vector2::new(1.0, 0.0);
        let sol = mpcc_solve(&x0, 1.0, &path, &MpccWeights::default(), &model(), None, None).unwrap();
        assert!(sol.converged, "kkt {}", sol.kkt_residual);
        assert!(sol.kkt_residual <= 1e-6);
        for (x, nu) in sol.states.iter().zip(&sol.nu) {
            let e = path.contouring_errors(&x.position, *nu).unwrap();
            assert!(e.contour_error() < 1e-6);
        }
        assert!(sol.nu_rate.iter().all(|r| *r > 0.0));
        assert!(sol.nu.windows(2).all(|w| w[1] >= w[0]));
        let u = sol.first_input();
        assert!(u.vz.abs() < 1e-6 && u.roll.abs() < 1e-6 && u.yaw_rate.abs() < 1e-6);
        assert!(u.pitch > 0.0);
    }

    #[test]
    fn offset_start_moves_toward_path() {
        let path = straight();
        let x0 = QuadState::at(Point3::new(1.0, 1.0, 1.0), 0.0);
        let weights = MpccWeights {
            contour: 1000.0,
            ..MpccWeights::default()
        };
        let sol = mpcc_solve(&x0, 1.0, &path, &weights, &model(), None, None).unwrap();
        let before = path.contouring_errors(&sol.states[0].position, sol.nu[0]).unwrap().contour_error();
        let later = path.contouring_errors(&sol.states[3].position, sol.nu[3]).unwrap().contour_error();
        assert!(later < before);
        // Roll command pushes the body toward -y.
        assert!(sol.first_input().roll > 0.0);
        assert!(sol.states[2].velocity.y < 0.0);
    }

    #[test]
    fn rejects_bad_parameter() {
        let path = straight();
        let x0 = QuadState::at(Point3::new(1.0, 0.0, 1.0), 0.0);
        assert!(matches!(
            mpcc_solve(&x0, 25.0, &path, &MpccWeights::default(), &model(), None, None),
            Err(ControlError::Config(_))
        ));
        let bad = MpccWeights {
            horizon: 1,
            ..MpccWeights::default()
        };
        assert!(mpcc_solve(&x0, 1.0, &path, &bad, &model(), None, None).is_err());
    }

    #[test]
    fn progress_stops_at_path_end() {
        let path = straight();
        let mut x0 = QuadState::at(Point3::new(19.0, 0.0, 1.0), 0.0);
        x0.velocity = Vector2::new(1.0, 0.0);
        let sol = mpcc_solve(&x0, 19.0, &path, &MpccWeights::default(), &model(), None, None).unwrap();
        assert!(sol.nu.iter().all(|n| *n <= path.length() + 1e-8));
    }
}
