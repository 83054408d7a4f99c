//! Eight-state quadrotor model.
//!
//! State `x = [p (3), v (2, planar), roll, pitch, yaw]`, input
//! `u = [v_z, roll_d, pitch_d, yaw_rate_d]`. Roll and pitch follow a first
//! order low-pass toward their commands, discretized exactly with
//! `alpha = exp(-ts / tau)`; planar velocity and position use forward Euler,
//! and the vertical axis is directly velocity controlled.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub const STATE_DIM: usize = 8;
pub const INPUT_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state or input")]
    NonFinite,
    #[error("attitude singularity: roll {roll}, pitch {pitch}")]
    Singularity { roll: f64, pitch: f64 },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("step {index} of rollout failed: {source}")]
    Rollout {
        index: usize,
        #[source]
        source: Box<DynamicsError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadState {
    pub position: Vector3<f64>,
    /// Planar (x, y) velocity in the world frame.
    pub velocity: Vector2<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl QuadState {
    pub fn at(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            position,
            yaw,
            ..Self::default()
        }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from_column_slice(&[
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.roll,
            self.pitch,
            self.yaw,
        ])
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: Vector3::new(x[0], x[1], x[2]),
            velocity: Vector2::new(x[3], x[4]),
            roll: x[5],
            pitch: x[6],
            yaw: x[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub vz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw_rate: f64,
}

impl ControlInput {
    pub fn new(vz: f64, roll: f64, pitch: f64, yaw_rate: f64) -> Self {
        Self {
            vz,
            roll,
            pitch,
            yaw_rate,
        }
    }

    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        [self.vz, self.roll, self.pitch, self.yaw_rate]
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self::new(u[0], u[1], u[2], u[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Symmetric input box `U`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputLimits {
    pub vz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw_rate: f64,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self {
            vz: 1.0,
            roll: 0.4,
            pitch: 0.4,
            yaw_rate: 1.5,
        }
    }
}

impl InputLimits {
    pub fn to_array(&self) -> [f64; INPUT_DIM] {
        [self.vz, self.roll, self.pitch, self.yaw_rate]
    }

    pub fn clip(&self, u: &ControlInput) -> ControlInput {
        ControlInput::new(
            u.vz.clamp(-self.vz, self.vz),
            u.roll.clamp(-self.roll, self.roll),
            u.pitch.clamp(-self.pitch, self.pitch),
            u.yaw_rate.clamp(-self.yaw_rate, self.yaw_rate),
        )
    }
}

/// Attitude part of the state set `X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateLimits {
    pub roll: f64,
    pub pitch: f64,
}

impl Default for StateLimits {
    fn default() -> Self {
        Self { roll: 0.4, pitch: 0.4 }
    }
}

impl StateLimits {
    pub fn contains(&self, x: &QuadState) -> bool {
        x.roll.abs() <= self.roll && x.pitch.abs() <= self.pitch
    }

    pub fn clamp(&self, x: &QuadState) -> QuadState {
        QuadState {
            roll: x.roll.clamp(-self.roll, self.roll),
            pitch: x.pitch.clamp(-self.pitch, self.pitch),
            ..*x
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub gravity: f64,
    /// Linear drag coefficient (1/s).
    pub drag: f64,
    /// Sampling time (s).
    pub ts: f64,
    /// Discretized attitude constant `exp(-ts / tau)`.
    pub alpha: f64,
    pub input_limits: InputLimits,
    pub state_limits: StateLimits,
    /// Constant planar acceleration acting only on the plant (m/s^2).
    pub wind: Vector2<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            drag: 0.3,
            ts: 0.1,
            alpha: 0.85,
            input_limits: InputLimits::default(),
            state_limits: StateLimits::default(),
            wind: Vector2::zeros(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidParameter(m.to_string()));
        if !(self.ts > 0.0) {
            return bad("ts must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.drag >= 0.0) || !self.gravity.is_finite() {
            return bad("drag must be non-negative and gravity finite");
        }
        let lim = self.input_limits.to_array();
        if lim.iter().any(|v| !(*v > 0.0)) {
            return bad("input limits must be positive");
        }
        if !(self.state_limits.roll > 0.0 && self.state_limits.roll < FRAC_PI_2)
            || !(self.state_limits.pitch > 0.0 && self.state_limits.pitch < FRAC_PI_2)
        {
            return bad("attitude limits must lie in (0, pi/2)");
        }
        Ok(())
    }

    /// Attitude time constant implied by `alpha` and `ts`.
    pub fn tau(&self) -> f64 {
        -self.ts / self.alpha.ln()
    }

    /// Returns params whose `alpha` follows from a given time constant.
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.alpha = (-self.ts / tau).exp();
        self
    }
}

/// Copy of `params` with a different attitude constant, used to build a
/// supervisor model that mismatches the plant.
pub fn perturb_params(params: &ModelParams, alpha: f64) -> Result<ModelParams, DynamicsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DynamicsError::InvalidParameter(format!(
            "alpha {alpha} outside (0, 1)"
        )));
    }
    Ok(ModelParams { alpha, ..*params })
}

fn yaw_rotation(yaw: f64) -> Matrix2<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Planar acceleration produced by the attitude, before drag. Pitch tilts
/// the thrust along body x, positive roll toward body -y.
fn tilt_acceleration(x: &QuadState, gravity: f64) -> Vector2<f64> {
    yaw_rotation(x.yaw) * Vector2::new(x.pitch.tan(), -x.roll.tan()) * gravity
}

/// One sampling period of the model. The input is saturated to `U` first.
pub fn step(x: &QuadState, u: &ControlInput, params: &ModelParams) -> Result<QuadState, DynamicsError> {
    if !x.is_finite() || !u.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    let u = params.input_limits.clip(u);
    let (a, ts) = (params.alpha, params.ts);
    let accel = tilt_acceleration(x, params.gravity) - x.velocity * params.drag + params.wind;
    let next = QuadState {
        position: x.position + Vector3::new(x.velocity.x, x.velocity.y, u.vz) * ts,
        velocity: x.velocity + accel * ts,
        roll: a * x.roll + (1.0 - a) * u.roll,
        pitch: a * x.pitch + (1.0 - a) * u.pitch,
        yaw: x.yaw + u.yaw_rate * ts,
    };
    if !next.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if next.roll.abs() >= FRAC_PI_2 || next.pitch.abs() >= FRAC_PI_2 {
        return Err(DynamicsError::Singularity {
            roll: next.roll,
            pitch: next.pitch,
        });
    }
    Ok(next)
}

/// States visited by applying `inputs` in order, starting with `x0`.
pub fn rollout(
    x0: &QuadState,
    inputs: &[ControlInput],
    params: &ModelParams,
) -> Result<Vec<QuadState>, DynamicsError> {
    if inputs.is_empty() {
        return Err(DynamicsError::InvalidParameter("empty input sequence".into()));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for (index, u) in inputs.iter().enumerate() {
        let next = step(&states[index], u, params).map_err(|e| DynamicsError::Rollout {
            index,
            source: Box::new(e),
        })?;
        states.push(next);
    }
    Ok(states)
}

/// Jacobians `(A, B)` of [`step`] with respect to state and input, assuming
/// the input lies inside `U` (saturation inactive).
pub fn linearize(
    x: &QuadState,
    _u: &ControlInput,
    params: &ModelParams,
) -> Result<(StateMatrix, InputMatrix), DynamicsError> {
    if !x.is_finite() {
        return Err(DynamicsError::NonFinite);
    }
    if x.roll.abs() >= FRAC_PI_2 || x.pitch.abs() >= FRAC_PI_2 {
        return Err(DynamicsError::Singularity {
            roll: x.roll,
            pitch: x.pitch,
        });
    }
    let (a, ts, g) = (params.alpha, params.ts, params.gravity);
    let rot = yaw_rotation(x.yaw);
    let (s, c) = x.yaw.sin_cos();
    let drot = Matrix2::new(-s, -c, c, -s);
    let tilt = Vector2::new(x.pitch.tan(), -x.roll.tan());
    let sec2_roll = 1.0 / x.roll.cos().powi(2);
    let sec2_pitch = 1.0 / x.pitch.cos().powi(2);

    let mut am = StateMatrix::identity();
    am[(0, 3)] = ts;
    am[(1, 4)] = ts;
    am[(3, 3)] = 1.0 - ts * params.drag;
    am[(4, 4)] = 1.0 - ts * params.drag;
    let d_roll = rot * Vector2::new(0.0, -sec2_roll) * (g * ts);
    let d_pitch = rot * Vector2::new(sec2_pitch, 0.0) * (g * ts);
    let d_yaw = drot * tilt * (g * ts);
    for r in 0..2 {
        am[(3 + r, 5)] = d_roll[r];
        am[(3 + r, 6)] = d_pitch[r];
        am[(3 + r, 7)] = d_yaw[r];
    }
    am[(5, 5)] = a;
    am[(6, 6)] = a;

    let mut bm = InputMatrix::zeros();
    bm[(2, 0)] = ts;
    bm[(5, 1)] = 1.0 - a;
    bm[(6, 2)] = 1.0 - a;
    bm[(7, 3)] = ts;
    Ok((am, bm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hover_is_a_fixed_point() {
        let x = QuadState::at(Vector3::new(1.0, 2.0, 3.0), 0.3);
        let next = step(&x, &ControlInput::default(), &ModelParams::default()).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn attitude_low_pass() {
        let next = step(
            &QuadState::default(),
            &ControlInput::new(0.0, 1.0, 0.0, 0.0),
            &ModelParams {
                input_limits: InputLimits {
                    roll: 1.2,
                    ..InputLimits::default()
                },
                ..ModelParams::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(next.roll, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn time_constant_from_alpha() {
        let p = ModelParams::default();
        assert_abs_diff_eq!(p.tau(), 0.615_312_9, epsilon = 1e-6);
        assert_abs_diff_eq!(p.tau(), 0.6152, epsilon = 2e-4);
        assert_abs_diff_eq!(p.with_tau(p.tau()).alpha, 0.85, epsilon = 1e-12);
    }

    #[test]
    fn perturbation_only_touches_alpha() {
        let p = ModelParams::default();
        assert_eq!(perturb_params(&p, 0.85).unwrap(), p);
        let q = perturb_params(&p, 0.75).unwrap();
        assert_eq!(q.alpha, 0.75);
        assert_abs_diff_eq!(q.tau(), -0.1 / 0.75f64.ln(), epsilon = 1e-15);
        assert!(q.tau() < p.tau());
        assert!(perturb_params(&p, 1.0).is_err());
        assert!(perturb_params(&p, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_input() {
        let r = step(&QuadState::default(), &ControlInput::new(f64::NAN, 0.0, 0.0, 0.0), &ModelParams::default());
        assert_eq!(r.unwrap_err(), DynamicsError::NonFinite);
    }

    #[test]
    fn singularity_is_reported() {
        let x = QuadState {
            roll: 1.58,
            ..QuadState::default()
        };
        let err = step(&x, &ControlInput::default(), &ModelParams { alpha: 0.999, ..ModelParams::default() });
        assert!(matches!(err, Err(DynamicsError::Singularity { .. })));
    }

    #[test]
    fn rollout_lengths_and_errors() {
        let p = ModelParams::default();
        let x = QuadState::default();
        let states = rollout(&x, &[ControlInput::default(); 5], &p).unwrap();
        assert_eq!(states.len(), 6);
        assert!(states.iter().all(|s| *s == x));
        let u = ControlInput::new(0.3, 0.1, -0.2, 0.05);
        assert_eq!(rollout(&x, &[u], &p).unwrap()[1], step(&x, &u, &p).unwrap());
        assert!(rollout(&x, &[], &p).is_err());
        let bad = [u, ControlInput::new(f64::INFINITY, 0.0, 0.0, 0.0)];
        match rollout(&x, &bad, &p) {
            Err(DynamicsError::Rollout { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Continuous-time model integrated with forward Euler at a fine step,
    /// inputs held over each coarse period.
    fn fine_integration(x0: &QuadState, inputs: &[ControlInput], p: &ModelParams, sub: usize) -> Vec<QuadState> {
        let tau = p.tau();
        let h = p.ts / sub as f64;
        let mut x = *x0;
        let mut out = vec![x];
        for u in inputs {
            for _ in 0..sub {
                let rot = yaw_rotation(x.yaw);
                let acc = rot * Vector2::new(x.pitch.tan(), -x.roll.tan()) * p.gravity - x.velocity * p.drag;
                x.position += Vector3::new(x.velocity.x, x.velocity.y, u.vz) * h;
                x.velocity += acc * h;
                x.roll += (u.roll - x.roll) / tau * h;
                x.pitch += (u.pitch - x.pitch) / tau * h;
                x.yaw += u.yaw_rate * h;
            }
            out.push(x);
        }
        out
    }

    fn smooth_inputs(n: usize) -> Vec<ControlInput> {
        (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                ControlInput::new(0.3 * (0.5 * t).sin(), 0.1 * (0.7 * t).sin(), 0.15 * (0.4 * t).cos(), 0.2 * (0.3 * t).sin())
            })
            .collect()
    }

    #[test]
    fn rollout_tracks_fine_step_integration() {
        let p = ModelParams::default();
        // Near-hover manoeuvre: attitude commands below half a degree.
        let gentle: Vec<_> = smooth_inputs(50)
            .into_iter()
            .map(|u| ControlInput::new(u.vz, 0.05 * u.roll, 0.05 * u.pitch, u.yaw_rate))
            .collect();
        let coarse = rollout(&QuadState::default(), &gentle, &p).unwrap();
        let fine = fine_integration(&QuadState::default(), &gentle, &p, 100);
        let err = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a.position - b.position).norm())
            .fold(0.0, f64::max);
        assert!(err < 2e-2, "position error {err}");
    }

    #[test]
    fn discretization_converges_at_first_order() {
        let base = ModelParams::default();
        let inputs = smooth_inputs(30);
        let reference = fine_integration(&QuadState::default(), &inputs, &base, 2000);
        let mut errors = vec![];
        for n in 0..4 {
            let factor = 1 << n;
            let p = ModelParams {
                ts: base.ts / factor as f64,
                ..base
            }
            .with_tau(base.tau());
            let fine_inputs: Vec<_> = inputs.iter().flat_map(|u| std::iter::repeat_n(*u, factor)).collect();
            let states = rollout(&QuadState::default(), &fine_inputs, &p).unwrap();
            errors.push((states.last().unwrap().position - reference.last().unwrap().position).norm());
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 1.6 && ratio < 2.5, "errors {errors:?}");
        }
    }

    #[test]
    fn constant_pitch_reaches_drag_equilibrium() {
        let p = ModelParams::default();
        let pitch = 0.2;
        let mut x = QuadState {
            pitch,
            ..QuadState::default()
        };
        let u = ControlInput::new(0.0, 0.0, pitch, 0.0);
        let mut prev = x.velocity.x;
        for _ in 0..800 {
            x = step(&x, &u, &p).unwrap();
            assert!(x.velocity.x >= prev);
            prev = x.velocity.x;
        }
        assert_abs_diff_eq!(x.velocity.x, p.gravity * pitch.tan() / p.drag, epsilon = 1e-6);
    }

    #[test]
    fn linearization_at_hover() {
        let p = ModelParams::default();
        let (a, b) = linearize(&QuadState::default(), &ControlInput::default(), &p).unwrap();
        assert_abs_diff_eq!(a[(3, 6)], p.ts * p.gravity, epsilon = 1e-15);
        assert_abs_diff_eq!(b[(5, 1)], 1.0 - p.alpha, epsilon = 1e-15);
    }

    fn fd_jacobians(x: &QuadState, u: &ControlInput, p: &ModelParams) -> (StateMatrix, InputMatrix) {
        let h = 1e-6;
        let xv = x.to_vector();
        let f = |xv: &StateVector, u: &ControlInput| step(&QuadState::from_vector(xv), u, p).unwrap().to_vector();
        let mut a = StateMatrix::zeros();
        for j in 0..STATE_DIM {
            let mut e = StateVector::zeros();
            e[j] = h;
            a.set_column(j, &((f(&(xv + e), u) - f(&(xv - e), u)) / (2.0 * h)));
        }
        let mut b = InputMatrix::zeros();
        let ua = u.to_array();
        for j in 0..INPUT_DIM {
            let (mut up, mut um) = (ua, ua);
            up[j] += h;
            um[j] -= h;
            let col = (f(&xv, &ControlInput::from_slice(&up)) - f(&xv, &ControlInput::from_slice(&um))) / (2.0 * h);
            b.set_column(j, &col);
        }
        (a, b)
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let p = ModelParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = QuadState {
                position: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)),
                velocity: Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                roll: rng.random_range(-0.4..0.4),
                pitch: rng.random_range(-0.4..0.4),
                yaw: rng.random_range(-3.0..3.0),
            };
            let u = ControlInput::new(rng.random_range(-0.9..0.9), rng.random_range(-0.39..0.39), rng.random_range(-0.39..0.39), rng.random_range(-1.4..1.4));
            let (a, b) = linearize(&x, &u, &p).unwrap();
            let (fa, fb) = fd_jacobians(&x, &u, &p);
            for (an, fd) in a.iter().zip(fa.iter()).chain(b.iter().zip(fb.iter())) {
                assert!((an - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{an} vs {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn step_is_pure(
            px in -5.0f64..5.0, vx in -2.0f64..2.0, roll in -0.4f64..0.4, pitch in -0.4f64..0.4,
            yaw in -3.0f64..3.0, ur in -0.4f64..0.4, up in -0.4f64..0.4
        ) {
            let x = QuadState { position: Vector3::new(px, 0.0, 1.0), velocity: Vector2::new(vx, -vx), roll, pitch, yaw };
            let u = ControlInput::new(0.2, ur, up, 0.1);
            let p = ModelParams::default();
            let a = step(&x, &u, &p).unwrap();
            let b = step(&x, &u, &p).unwrap();
            prop_assert_eq!(a.to_vector().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.to_vector().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert!(p.state_limits.contains(&a));
        }
    }
}
