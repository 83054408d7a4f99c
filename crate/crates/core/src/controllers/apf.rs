//! Artificial potential field baseline: fly at a fixed speed down the
//! negative gradient of an attractive well at the setpoint plus repulsive
//! shells around obstacles.

use crate::dynamics::{ControlInput, ModelParams, QuadState};
use crate::geometry::Point3;
use crate::world::{yaw_pd, World, YawGains};
use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApfParams {
    pub attraction: f64,
    pub repulsion: f64,
    /// Obstacles farther than this (surface distance, m) exert no force.
    pub influence_radius: f64,
    pub reference_speed: f64,
    /// Proportional gain from velocity error to commanded acceleration.
    pub velocity_gain: f64,
    pub yaw_gains: YawGains,
}

impl Default for ApfParams {
    fn default() -> Self {
        Self {
            attraction: 1.0,
            repulsion: 1.0,
            influence_radius: 2.0,
            reference_speed: 1.3,
            velocity_gain: 1.5,
            yaw_gains: YawGains::default(),
        }
    }
}

/// Negative gradient of the potential at `p`.
pub fn apf_force(p: &Point3, world: &World, setpoint: &Point3, params: &ApfParams) -> Point3 {
    let mut force = (setpoint - p) * (2.0 * params.attraction);
    for obstacle in &world.obstacles {
        let (dist, grad) = obstacle.distance_and_gradient(p);
        if dist < params.influence_radius {
            let d = dist.max(1e-3);
            let push = 2.0 * params.repulsion * (1.0 / d - 1.0 / params.influence_radius) / (d * d);
            force += grad * push;
        }
    }
    force
}

pub fn apf_step(state: &QuadState, world: &World, t: f64, params: &ApfParams, model: &ModelParams) -> ControlInput {
    let sp = world.setpoint(t);
    let force = apf_force(&state.position, world, &sp.point, params);
    let yaw_rate = yaw_pd(state, sp.heading, &params.yaw_gains, 0.0, model.input_limits.yaw_rate);
    let norm = force.norm();
    if !(norm > 1e-9) {
        return model.input_limits.clip(&ControlInput::new(0.0, 0.0, 0.0, yaw_rate));
    }
    let desired = force / norm * params.reference_speed;
    // Acceleration that closes the velocity error, with drag compensated.
    let accel = (desired.xy() - state.velocity) * params.velocity_gain + state.velocity * model.drag - model.wind;
    let body = Rotation2::new(-state.yaw) * accel / model.gravity;
    let tilt = Vector2::new((-body.y).atan(), body.x.atan());
    model
        .input_limits
        .clip(&ControlInput::new(desired.z, tilt.x, tilt.y, yaw_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SplinePath;
    use crate::world::Obstacle;

    fn world(obstacles: Vec<Obstacle>) -> World {
        let g = SplinePath::line(Point3::new(0.0, 0.0, 1.0), Point3::new(20.0, 0.0, 1.0)).unwrap();
        World::new(g, obstacles, 1.3).unwrap()
    }

    #[test]
    fn holds_on_setpoint() {
        let w = world(vec![]);
        let x = QuadState::at(Point3::new(0.0, 0.0, 1.0), 0.0);
        let u = apf_step(&x, &w, 0.0, &ApfParams::default(), &ModelParams::default());
        assert!(u.to_array().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn obstacle_ahead_adds_lateral_push() {
        let w = world(vec![Obstacle::cylinder(2.0, 0.1, 0.2)]);
        let p = Point3::new(1.0, 0.0, 1.0);
        let f = apf_force(&p, &w, &Point3::new(5.0, 0.0, 1.0), &ApfParams::default());
        assert!(f.y < 0.0, "force {f:?}");
        let free = apf_force(&p, &world(vec![]), &Point3::new(5.0, 0.0, 1.0), &ApfParams::default());
        assert_eq!(free.y, 0.0);
    }

    #[test]
    fn flies_toward_setpoint() {
        let w = world(vec![]);
        let x = QuadState::at(Point3::new(0.0, 0.0, 1.0), 0.0);
        let u = apf_step(&x, &w, 2.0, &ApfParams::default(), &ModelParams::default());
        // Positive pitch accelerates along +x at zero yaw.
        assert!(u.pitch > 0.0 && u.roll.abs() < 1e-12);
    }
}
