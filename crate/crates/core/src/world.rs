//! Obstacles, the simulated planar range finder, the moving guidance
//! setpoint and assembly of the policy observation.

use crate::dynamics::QuadState;
use crate::geometry::{Point3, SplinePath};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Number of range readings in an observation.
pub const NUM_RAYS: usize = 40;
/// Observation length: guidance offset (2), velocity (3), ranges.
pub const OBS_DIM: usize = 2 + 3 + NUM_RAYS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),
    #[error("setpoint speed must be positive, got {0}")]
    InvalidSpeed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObstacleShape {
    /// Vertical cylinder of unbounded height.
    Cylinder { center: Vector2<f64>, radius: f64 },
    /// Axis-aligned box.
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub shape: ObstacleShape,
    pub velocity: Vector2<f64>,
}

impl Obstacle {
    pub fn cylinder(x: f64, y: f64, radius: f64) -> Self {
        Self {
            shape: ObstacleShape::Cylinder {
                center: Vector2::new(x, y),
                radius,
            },
            velocity: Vector2::zeros(),
        }
    }

    pub fn cuboid(center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        Self {
            shape: ObstacleShape::Box { center, half_extents },
            velocity: Vector2::zeros(),
        }
    }

    pub fn moving(mut self, velocity: Vector2<f64>) -> Self {
        self.velocity = velocity;
        self
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let ok = match self.shape {
            ObstacleShape::Cylinder { center, radius } => radius > 0.0 && center.iter().all(|v| v.is_finite()),
            ObstacleShape::Box { center, half_extents } => {
                half_extents.iter().all(|h| *h > 0.0) && center.iter().all(|v| v.is_finite())
            }
        };
        if ok && self.velocity.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(WorldError::InvalidObstacle(format!("{self:?}")))
        }
    }

    /// Planar center of the obstacle.
    pub fn center_xy(&self) -> Vector2<f64> {
        match self.shape {
            ObstacleShape::Cylinder { center, .. } => center,
            ObstacleShape::Box { center, .. } => center.xy(),
        }
    }

    /// Signed distance from `p` to the obstacle surface (negative inside).
    pub fn surface_distance(&self, p: &Point3) -> f64 {
        self.distance_and_gradient(p).0
    }

    /// Signed distance and its gradient with respect to `p`.
    pub fn distance_and_gradient(&self, p: &Point3) -> (f64, Point3) {
        match self.shape {
            ObstacleShape::Cylinder { center, radius } => {
                let d = p.xy() - center;
                let n = d.norm();
                let grad = if n > 0.0 {
                    Vector3::new(d.x / n, d.y / n, 0.0)
                } else {
                    Vector3::new(1.0, 0.0, 0.0)
                };
                (n - radius, grad)
            }
            ObstacleShape::Box { center, half_extents } => {
                let rel = p - center;
                let q = rel.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0));
                let on = outside.norm();
                if on > 0.0 {
                    let grad = outside.zip_map(&rel, |o, r| o * r.signum()) / on;
                    (on, grad)
                } else {
                    let axis = q.imax();
                    let mut grad = Vector3::zeros();
                    grad[axis] = if rel[axis] >= 0.0 { 1.0 } else { -1.0 };
                    (q[axis], grad)
                }
            }
        }
    }

    /// Distance along the horizontal ray `origin + s * dir` (unit `dir`) to
    /// the first intersection at height `z`, if any.
    pub fn ray_hit(&self, origin: &Vector2<f64>, dir: &Vector2<f64>, z: f64) -> Option<f64> {
        match self.shape {
            ObstacleShape::Cylinder { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = -b - disc.sqrt();
                (s >= 0.0).then_some(s)
            }
            ObstacleShape::Box { center, half_extents } => {
                if (z - center.z).abs() > half_extents.z {
                    return None;
                }
                let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
                for k in 0..2 {
                    let (a, b) = (center[k] - half_extents[k], center[k] + half_extents[k]);
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < a || origin[k] > b {
                            return None;
                        }
                    } else {
                        let (t0, t1) = ((a - origin[k]) / dir[k], (b - origin[k]) / dir[k]);
                        lo = lo.max(t0.min(t1));
                        hi = hi.min(t0.max(t1));
                    }
                }
                (lo <= hi).then_some(lo)
            }
        }
    }

    pub fn translated(&self, delta: Vector2<f64>) -> Self {
        let shape = match self.shape {
            ObstacleShape::Cylinder { center, radius } => ObstacleShape::Cylinder {
                center: center + delta,
                radius,
            },
            ObstacleShape::Box { center, half_extents } => ObstacleShape::Box {
                center: center + Vector3::new(delta.x, delta.y, 0.0),
                half_extents,
            },
        };
        Self { shape, ..*self }
    }

    /// Same obstacle with its size scaled about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let shape = match self.shape {
            ObstacleShape::Cylinder { center, radius } => ObstacleShape::Cylinder {
                center,
                radius: radius * factor,
            },
            ObstacleShape::Box { center, half_extents } => ObstacleShape::Box {
                center,
                half_extents: Vector3::new(half_extents.x * factor, half_extents.y * factor, half_extents.z),
            },
        };
        Self { shape, ..*self }
    }
}

/// Horizontal range finder fanned symmetrically about the yaw direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaserConfig {
    pub field_of_view: f64,
    pub max_range: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        Self {
            field_of_view: PI,
            max_range: 5.0,
        }
    }
}

impl LaserConfig {
    /// Ray angle relative to the heading, right-most ray first.
    pub fn ray_angle(&self, i: usize) -> f64 {
        -0.5 * self.field_of_view + self.field_of_view * (i as f64 + 0.5) / NUM_RAYS as f64
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub guidance: SplinePath,
    pub obstacles: Vec<Obstacle>,
    pub setpoint_speed: f64,
    pub laser: LaserConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoint {
    pub point: Point3,
    pub heading: f64,
    pub param: f64,
    /// The setpoint has reached the end of the guidance.
    pub complete: bool,
}

impl World {
    pub fn new(guidance: SplinePath, obstacles: Vec<Obstacle>, setpoint_speed: f64) -> Result<Self, WorldError> {
        if !(setpoint_speed > 0.0) {
            return Err(WorldError::InvalidSpeed(setpoint_speed));
        }
        for o in &obstacles {
            o.validate()?;
        }
        Ok(Self {
            guidance,
            obstacles,
            setpoint_speed,
            laser: LaserConfig::default(),
        })
    }

    pub fn with_laser(mut self, laser: LaserConfig) -> Self {
        self.laser = laser;
        self
    }

    pub fn setpoint(&self, t: f64) -> Setpoint {
        let length = self.guidance.length();
        let raw = self.setpoint_speed * t.max(0.0);
        let param = raw.min(length);
        // The guidance never has a degenerate tangent: build rejects duplicate points.
        let frame = self
            .guidance
            .eval(param)
            .expect("guidance spline has a regular tangent");
        Setpoint {
            point: frame.point,
            heading: frame.heading,
            param,
            complete: raw >= length,
        }
    }

    /// Ranges of the 40 horizontal rays at the quadrotor height.
    pub fn raycast(&self, state: &QuadState) -> [f64; NUM_RAYS] {
        let origin = state.position.xy();
        let mut out = [self.laser.max_range; NUM_RAYS];
        for (i, r) in out.iter_mut().enumerate() {
            let angle = state.yaw + self.laser.ray_angle(i);
            let dir = Vector2::new(angle.cos(), angle.sin());
            *r = cast_ray(&self.obstacles, &origin, &dir, state.position.z, self.laser.max_range);
        }
        out
    }

    pub fn observe(&self, state: &QuadState, t: f64, vz: f64) -> Observation {
        let sp = self.setpoint(t);
        let (s, c) = sp.heading.sin_cos();
        let v = state.velocity;
        Observation {
            offset: guidance_offset(&state.position, &sp.point, sp.heading),
            velocity: Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, vz),
            ranges: self.raycast(state),
        }
    }

    /// True when `state` is closer than `margin` to any obstacle surface.
    pub fn collision(&self, state: &QuadState, margin: f64) -> bool {
        self.obstacles
            .iter()
            .any(|o| o.surface_distance(&state.position) < margin)
    }

    /// Smallest signed surface distance, `+inf` in an empty world.
    pub fn clearance(&self, p: &Point3) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.surface_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// World with every obstacle moved by `velocity * ts`.
    pub fn advance_obstacles(&self, ts: f64) -> World {
        World {
            obstacles: self
                .obstacles
                .iter()
                .map(|o| o.translated(o.velocity * ts))
                .collect(),
            ..self.clone()
        }
    }
}

/// Nearest hit among `obstacles`, or `max_range`.
pub fn cast_ray(obstacles: &[Obstacle], origin: &Vector2<f64>, dir: &Vector2<f64>, z: f64, max_range: f64) -> f64 {
    obstacles
        .iter()
        .filter_map(|o| o.ray_hit(origin, dir, z))
        .fold(max_range, f64::min)
        .clamp(0.0, max_range)
}

/// Offset `(p - p_d) R(heading)` expressed in the guidance frame; the
/// along-track component is dropped and `(lateral, vertical)` returned.
pub fn guidance_offset(p: &Point3, p_d: &Point3, heading: f64) -> Vector2<f64> {
    let r = p - p_d;
    let (s, c) = heading.sin_cos();
    Vector2::new(-s * r.x + c * r.y, r.z)
}

/// Policy input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub offset: Vector2<f64>,
    /// Planar velocity in the guidance frame, then the vertical rate.
    pub velocity: Vector3<f64>,
    pub ranges: [f64; NUM_RAYS],
}

impl Observation {
    pub fn to_features(&self) -> [f64; OBS_DIM] {
        let mut f = [0.0; OBS_DIM];
        f[0] = self.offset.x;
        f[1] = self.offset.y;
        f[2..5].copy_from_slice(self.velocity.as_slice());
        f[5..].copy_from_slice(&self.ranges);
        f
    }

    pub fn from_features(f: &[f64]) -> Self {
        let mut ranges = [0.0; NUM_RAYS];
        ranges.copy_from_slice(&f[5..OBS_DIM]);
        Self {
            offset: Vector2::new(f[0], f[1]),
            velocity: Vector3::new(f[2], f[3], f[4]),
            ranges,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_features().iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YawGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for YawGains {
    fn default() -> Self {
        Self { kp: 2.0, kd: 0.0 }
    }
}

/// Yaw-rate command turning the quadrotor toward `heading`.
pub fn yaw_pd(state: &QuadState, heading: f64, gains: &YawGains, yaw_rate_estimate: f64, limit: f64) -> f64 {
    (gains.kp * wrap_angle(heading - state.yaw) - gains.kd * yaw_rate_estimate).clamp(-limit, limit)
}
