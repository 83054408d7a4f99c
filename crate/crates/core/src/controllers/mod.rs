//! Optimization-based controllers sharing one Gauss-Newton SQP core, plus
//! the artificial potential field baseline.

mod apf;
mod mpc;
mod mpcc;
pub mod qp;
mod sqp;

pub use apf::{apf_force, apf_step, ApfParams};
pub use mpc::{mpc_track_solve, offline_traj_opt, TimedReference, TrackingWeights, TrajOptConfig};
pub use mpcc::{mpcc_solve, onpolicy_mpcc_solve, rollout_policy, MpccProblem};
pub use sqp::SolverOptions;

use crate::dynamics::{ControlInput, DynamicsError, QuadState, INPUT_DIM};
use crate::geometry::GeometryError;
use crate::policy::{Policy, PolicyError};
use crate::world::{Obstacle, World, YawGains};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("policy output: {0}")]
    Policy(#[from] PolicyError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

fn config_error<T>(msg: impl Into<String>) -> Result<T, ControlError> {
    Err(ControlError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpccWeights {
    pub contour: f64,
    pub lag: f64,
    pub progress: f64,
    /// Diagonal input penalty for `[v_z, roll_d, pitch_d, yaw_rate_d]`.
    pub input: [f64; INPUT_DIM],
    /// Policy-following weight, only used by the on-policy variant.
    pub follow: f64,
    pub horizon: usize,
    pub max_progress_rate: f64,
    pub solver: SolverOptions,
}

impl Default for MpccWeights {
    fn default() -> Self {
        Self {
            contour: 25.0,
            lag: 100.0,
            progress: 1.0,
            input: [0.1; INPUT_DIM],
            follow: 5.0,
            horizon: 20,
            max_progress_rate: 2.0,
            solver: SolverOptions::default(),
        }
    }
}

impl MpccWeights {
    /// Weights used for on-policy exploration: a looser contour weight.
    pub fn on_policy() -> Self {
        Self {
            contour: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.contour >= 0.0 && self.lag >= 0.0) {
            return config_error("contour and lag weights must be non-negative");
        }
        if !(self.progress >= 0.0) {
            return config_error("progress weight must be non-negative");
        }
        if !self.input.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return config_error("input weights must be positive");
        }
        if !(self.follow >= 0.0) {
            return config_error("follow weight must be non-negative");
        }
        if self.horizon < 2 {
            return config_error("horizon must be at least 2");
        }
        if !(self.max_progress_rate > 0.0) {
            return config_error("maximum progress rate must be positive");
        }
        Ok(())
    }
}

/// Soft obstacle cost `weight * max(0, onset - dist)^2` per stage and obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct Avoidance {
    pub obstacles: Vec<Obstacle>,
    pub onset: f64,
    pub weight: f64,
}

impl Avoidance {
    pub fn new(obstacles: Vec<Obstacle>) -> Self {
        Self {
            obstacles,
            onset: 3.0,
            weight: 100.0,
        }
    }

    pub fn with_onset(mut self, onset: f64) -> Self {
        self.onset = onset;
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpccSolution {
    pub states: Vec<QuadState>,
    pub inputs: Vec<ControlInput>,
    /// Path parameter per stage, `N + 1` entries.
    pub nu: Vec<f64>,
    /// Progress rate per stage, `N` entries.
    pub nu_rate: Vec<f64>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub converged: bool,
}

impl MpccSolution {
    pub fn first_input(&self) -> ControlInput {
        self.inputs[0]
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    /// Inputs and progress rates moved one stage ahead, last stage repeated.
    pub fn shifted(&self) -> (Vec<ControlInput>, Vec<f64>) {
        let mut u: Vec<_> = self.inputs[1..].to_vec();
        u.push(*self.inputs.last().unwrap());
        let mut r: Vec<_> = self.nu_rate.iter().skip(1).copied().collect();
        r.extend(self.nu_rate.last().copied());
        (u, r)
    }

    /// A solution whose shifted warm start is this one, for warm-starting
    /// a solve at the same time step (for example at a perturbed state).
    pub fn unshifted(&self) -> MpccSolution {
        let mut out = self.clone();
        if let Some(u) = self.inputs.first() {
            out.inputs.insert(0, *u);
        }
        if let Some(r) = self.nu_rate.first() {
            out.nu_rate.insert(0, *r);
        }
        out
    }
}

/// What the on-policy variants need to roll the policy forward.
pub struct PolicyContext<'a> {
    pub policy: &'a dyn Policy,
    pub world: &'a World,
    /// Episode time of the current state.
    pub time: f64,
    /// Vertical velocity fed to the first observation.
    pub vz: f64,
    pub yaw_gains: YawGains,
}
