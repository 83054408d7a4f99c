//! Time-parametrized trajectory tracking and the offline trajectory
//! optimization that produces its references.

use super::mpcc::{check_state, finish, rollout_policy, HorizonProblem, Tracking};
use super::sqp::SolverOptions;
use super::{config_error, Avoidance, ControlError, MpccSolution, PolicyContext};
use crate::dynamics::{ControlInput, ModelParams, QuadState, INPUT_DIM};
use crate::geometry::SplinePath;
use crate::world::Obstacle;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// States and inputs sampled every `ts` seconds starting at time zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedReference {
    pub ts: f64,
    pub states: Vec<QuadState>,
    /// `inputs[k]` drives `states[k]` to `states[k + 1]`.
    pub inputs: Vec<ControlInput>,
    pub converged: bool,
}

impl TimedReference {
    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.ts).collect()
    }

    pub fn duration(&self) -> f64 {
        (self.states.len() - 1) as f64 * self.ts
    }

    /// Stage `k`, holding the last state once the reference runs out.
    pub fn state(&self, k: usize) -> QuadState {
        self.states[k.min(self.states.len() - 1)]
    }

    pub fn input(&self, k: usize) -> ControlInput {
        self.inputs.get(k).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingWeights {
    /// Weights on `[x, y, z, v_x, v_y]`.
    pub state: [f64; 5],
    pub input: [f64; INPUT_DIM],
    pub follow: f64,
    pub horizon: usize,
    pub solver: SolverOptions,
}

impl Default for TrackingWeights {
    fn default() -> Self {
        Self {
            state: [1.0; 5],
            input: [0.1; INPUT_DIM],
            follow: 5.0,
            horizon: 20,
            solver: SolverOptions::default(),
        }
    }
}

impl TrackingWeights {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !self.state.iter().all(|q| *q >= 0.0) {
            return config_error("state weights must be non-negative");
        }
        if !self.input.iter().all(|r| *r > 0.0) {
            return config_error("input weights must be positive");
        }
        if !(self.follow >= 0.0) {
            return config_error("follow weight must be non-negative");
        }
        if self.horizon < 2 {
            return config_error("horizon must be at least 2");
        }
        Ok(())
    }
}

/// Tracks `reference` from its stage `index` (the stage `state` belongs to).
/// Inputs are penalized as deviations from the reference inputs. Past the
/// end of the reference the final state is held. With `policy`, the policy
/// rollout is followed with weight `weights.follow`.
pub fn mpc_track_solve(
    state: &QuadState,
    reference: &TimedReference,
    index: usize,
    weights: &TrackingWeights,
    model: &ModelParams,
    warm: Option<&MpccSolution>,
    policy: Option<&PolicyContext<'_>>,
) -> Result<MpccSolution, ControlError> {
    let started = Instant::now();
    weights.validate()?;
    model.validate()?;
    check_state(state, model)?;
    if (reference.ts - model.ts).abs() > 1e-12 {
        return config_error("reference sampling time differs from the model");
    }
    let n = weights.horizon;
    let targets: Vec<QuadState> = (1..=n).map(|k| reference.state(index + k)).collect();
    let input_ref: Vec<ControlInput> = (0..n).map(|k| reference.input(index + k)).collect();
    let mut problem = HorizonProblem::new(
        *state,
        model,
        n,
        Tracking::Reference {
            states: &targets,
            q: weights.state,
        },
        weights.input,
        None,
    );
    problem.input_ref = Some(&input_ref);
    let follow;
    if let Some(ctx) = policy {
        if weights.follow > 0.0 {
            follow = rollout_policy(state, ctx, model, n)?;
            problem.follow = Some((&follow, weights.follow));
        }
    }
    let z0 = match warm {
        Some(w) if !w.inputs.is_empty() => problem.pack(&w.shifted().0, &[]),
        _ => problem.pack(&input_ref, &[]),
    };
    finish(&problem, z0, &weights.solver, started)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajOptConfig {
    pub contour: f64,
    pub lag: f64,
    pub input: [f64; INPUT_DIM],
    pub avoidance_onset: f64,
    pub avoidance_weight: f64,
    pub solver: SolverOptions,
}

impl Default for TrajOptConfig {
    fn default() -> Self {
        Self {
            contour: 25.0,
            lag: 100.0,
            input: [0.1; INPUT_DIM],
            avoidance_onset: 1.6,
            avoidance_weight: 2000.0,
            // The whole-path problem is large; its Gauss-Newton tail converges
            // slowly and a looser stationarity level is enough for a reference.
            solver: SolverOptions {
                stationarity_tol: 1e-3,
                max_iterations: 100,
                ..SolverOptions::default()
            },
        }
    }
}

/// One contouring solve over the whole path with the progress rate pinned
/// to `speed`, so stage `k` is reached at time `k * ts`. Starts at the path
/// start moving along it at `speed`.
pub fn offline_traj_opt(
    path: &SplinePath,
    obstacles: &[Obstacle],
    speed: f64,
    model: &ModelParams,
    config: &TrajOptConfig,
) -> Result<TimedReference, ControlError> {
    model.validate()?;
    if !(speed > 0.0) {
        return config_error("speed must be positive");
    }
    let horizon = (path.length() / (speed * model.ts)).floor() as usize;
    if horizon < 2 {
        return config_error("path too short for the requested speed");
    }
    let start = path.eval(0.0)?;
    let mut x0 = QuadState::at(start.point, start.heading);
    x0.velocity = Vector2::new(start.tangent.x, start.tangent.y) * speed;
    let avoid = Avoidance {
        obstacles: obstacles.to_vec(),
        onset: config.avoidance_onset,
        weight: config.avoidance_weight,
    };
    let mut problem = HorizonProblem::new(
        x0,
        model,
        horizon,
        Tracking::Path {
            path,
            nu0: 0.0,
            contour: config.contour,
            lag: config.lag,
            fixed_rate: Some(speed),
        },
        config.input,
        None,
    );
    if !obstacles.is_empty() {
        problem.avoid = Some(&avoid);
    }
    let z0 = problem.pack(&[ControlInput::default()], &[]);
    let sol = finish(&problem, z0, &config.solver, Instant::now())?;
    Ok(TimedReference {
        ts: model.ts,
        states: sol.states,
        inputs: sol.inputs,
        converged: sol.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step;
    use crate::geometry::Point3;

    fn line() -> SplinePath {
        SplinePath::line(Point3::new(0.0, 0.0, 1.0), Point3::new(8.0, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn straight_reference_is_uniform_motion() {
        let m = ModelParams::default();
        let r = offline_traj_opt(&line(), &[], 1.0, &m, &TrajOptConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.states.len(), 81);
        for (k, x) in r.states.iter().enumerate() {
            assert!((x.position.x - k as f64 * 0.1).abs() < 0.05, "stage {k}: {}", x.position.x);
            assert!(x.position.y.abs() < 1e-6);
        }
        let t = r.times();
        assert!(t.windows(2).all(|w| (w[1] - w[0] - 0.1).abs() < 1e-12));
    }

    #[test]
    fn reference_clears_obstacle() {
        let m = ModelParams::default();
        let path = SplinePath::line(Point3::new(0.0, 0.0, 1.0), Point3::new(10.0, 0.0, 1.0)).unwrap();
        let obstacle = Obstacle::cylinder(5.0, 0.1, 0.2);
        let cfg = TrajOptConfig::default();
        let r = offline_traj_opt(&path, &[obstacle], 1.0, &m, &cfg).unwrap();
        let min = r
            .states
            .iter()
            .map(|x| obstacle.surface_distance(&x.position))
            .fold(f64::INFINITY, f64::min);
        assert!(min >= 1.0, "min clearance {min}");
    }

    #[test]
    fn on_feasible_reference_reproduces_its_inputs() {
        let m = ModelParams::default();
        let mut x = QuadState::at(Point3::new(0.0, 0.0, 1.0), 0.0);
        let mut states = vec![x];
        let inputs: Vec<ControlInput> = (0..40)
            .map(|k| ControlInput::new(0.1, 0.05 * (k as f64 * 0.2).sin(), 0.1, 0.0))
            .collect();
        for u in &inputs {
            x = step(&x, u, &m).unwrap();
            states.push(x);
        }
        let reference = TimedReference {
            ts: m.ts,
            states: states.clone(),
            inputs: inputs.clone(),
            converged: true,
        };
        let sol = mpc_track_solve(&states[0], &reference, 0, &TrackingWeights::default(), &m, None, None).unwrap();
        assert!(sol.cost < 1e-10, "cost {}", sol.cost);
        let u = sol.first_input();
        assert!((u.roll - inputs[0].roll).abs() < 1e-6 && (u.pitch - inputs[0].pitch).abs() < 1e-6);
    }
}
