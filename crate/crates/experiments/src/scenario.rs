//! Plain-text scenario files and procedural obstacle courses.
//!
//! A scenario is one directive per line, `#` starts a comment:
//!
//! ```text
//! setpoint_speed 1.3
//! seed 7
//! guidance 0 0 1.5
//! guidance 100 0 1.5
//! cylinder 12.0 0.3 0.2
//! cylinder 20.0 -3.0 0.2 0.0 0.5
//! box 30.0 0.0 1.5 0.2 0.2 2.0
//! ```
//!
//! `guidance` adds a control point. `cylinder x y r [vx vy]` and
//! `box cx cy cz hx hy hz [vx vy]` add obstacles with an optional planar
//! velocity.

use mpcc_imitation::geometry::{Point3, SplinePath};
use mpcc_imitation::world::{Obstacle, ObstacleShape, World};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid course: {0}")]
    Course(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub guidance: Vec<Point3>,
    pub obstacles: Vec<Obstacle>,
    pub setpoint_speed: f64,
    pub seed: Option<u64>,
}

fn numbers(line: usize, fields: &[&str], counts: &[usize]) -> Result<Vec<f64>, ScenarioError> {
    if !counts.contains(&fields.len()) {
        return Err(ScenarioError::Parse {
            line,
            message: format!("expected {counts:?} numbers, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ScenarioError::Parse {
                    line,
                    message: format!("not a finite number: {f}"),
                })
        })
        .collect()
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut out = Scenario {
            guidance: Vec::new(),
            obstacles: Vec::new(),
            setpoint_speed: 1.3,
            seed: None,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut fields = content.split_whitespace();
            let key = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            match key {
                "setpoint_speed" => out.setpoint_speed = numbers(line, &rest, &[1])?[0],
                "seed" => {
                    let [s] = rest.as_slice() else {
                        return Err(ScenarioError::Parse {
                            line,
                            message: "seed takes one integer".into(),
                        });
                    };
                    out.seed = Some(s.parse().map_err(|_| ScenarioError::Parse {
                        line,
                        message: format!("bad seed {s}"),
                    })?);
                }
                "guidance" => {
                    let v = numbers(line, &rest, &[3])?;
                    out.guidance.push(Point3::new(v[0], v[1], v[2]));
                }
                "cylinder" => {
                    let v = numbers(line, &rest, &[3, 5])?;
                    let mut o = Obstacle::cylinder(v[0], v[1], v[2]);
                    if v.len() == 5 {
                        o = o.moving(Vector2::new(v[3], v[4]));
                    }
                    out.obstacles.push(o);
                }
                "box" => {
                    let v = numbers(line, &rest, &[6, 8])?;
                    let mut o = Obstacle::cuboid(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]));
                    if v.len() == 8 {
                        o = o.moving(Vector2::new(v[6], v[7]));
                    }
                    out.obstacles.push(o);
                }
                other => {
                    return Err(ScenarioError::Parse {
                        line,
                        message: format!("unknown directive {other}"),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "setpoint_speed {:?}", self.setpoint_speed);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed {seed}");
        }
        for p in &self.guidance {
            let _ = writeln!(s, "guidance {:?} {:?} {:?}", p.x, p.y, p.z);
        }
        for o in &self.obstacles {
            let v = o.velocity;
            let moving = v != Vector2::zeros();
            match o.shape {
                ObstacleShape::Cylinder { center, radius } => {
                    let _ = write!(s, "cylinder {:?} {:?} {:?}", center.x, center.y, radius);
                }
                ObstacleShape::Box { center, half_extents } => {
                    let _ = write!(
                        s,
                        "box {:?} {:?} {:?} {:?} {:?} {:?}",
                        center.x, center.y, center.z, half_extents.x, half_extents.y, half_extents.z
                    );
                }
            }
            if moving {
                let _ = write!(s, " {:?} {:?}", v.x, v.y);
            }
            s.push('\n');
        }
        s
    }

    pub fn world(&self) -> Result<World, ScenarioError> {
        let guidance = SplinePath::new(&self.guidance).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        World::new(guidance, self.obstacles.clone(), self.setpoint_speed).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn from_world(world: &World, seed: Option<u64>) -> Self {
        Self {
            guidance: world.guidance.control_points().to_vec(),
            obstacles: world.obstacles.clone(),
            setpoint_speed: world.setpoint_speed,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CourseOptions {
    pub height: f64,
    pub radius: f64,
    /// Obstacle centers are offset across the guidance by up to this much.
    pub lateral_jitter: f64,
    pub setpoint_speed: f64,
}

impl Default for CourseOptions {
    fn default() -> Self {
        Self {
            height: 1.5,
            radius: 0.2,
            lateral_jitter: 0.5,
            setpoint_speed: 1.3,
        }
    }
}

/// Straight course along +x with cylinders at successive gaps drawn from
/// `spacing_mean ± spacing_spread`. The first obstacle sits one gap after
/// the start; none is placed beyond `length`.
pub fn gen_course(
    length: f64,
    spacing_mean: f64,
    spacing_spread: f64,
    seed: u64,
    options: &CourseOptions,
) -> Result<World, ScenarioError> {
    if !(length > 0.0) {
        return Err(ScenarioError::Course("length must be positive".into()));
    }
    if !(spacing_spread >= 0.0 && spacing_mean > spacing_spread) {
        return Err(ScenarioError::Course(format!(
            "spacing {spacing_mean} ± {spacing_spread} must satisfy mean > spread >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obstacles = Vec::new();
    let mut s = 0.0;
    loop {
        s += if spacing_spread > 0.0 {
            rng.random_range(spacing_mean - spacing_spread..=spacing_mean + spacing_spread)
        } else {
            spacing_mean
        };
        if s > length {
            break;
        }
        let lateral = if options.lateral_jitter > 0.0 {
            rng.random_range(-options.lateral_jitter..=options.lateral_jitter)
        } else {
            0.0
        };
        obstacles.push(Obstacle::cylinder(s, lateral, options.radius));
    }
    empty_course(length, options).map(|w| World { obstacles, ..w })
}

/// The same straight guidance with no obstacles.
pub fn empty_course(length: f64, options: &CourseOptions) -> Result<World, ScenarioError> {
    let guidance = SplinePath::line(
        Point3::new(0.0, 0.0, options.height),
        Point3::new(length, 0.0, options.height),
    )
    .map_err(|e| ScenarioError::Course(e.to_string()))?;
    World::new(guidance, Vec::new(), options.setpoint_speed).map_err(|e| ScenarioError::Course(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn course_is_reproducible_and_dense_enough() {
        let o = CourseOptions::default();
        let a = gen_course(200.0, 3.0, 1.5, 11, &o).unwrap();
        let b = gen_course(200.0, 3.0, 1.5, 11, &o).unwrap();
        assert_eq!(a.obstacles, b.obstacles);
        assert!((50..=130).contains(&a.obstacles.len()), "{}", a.obstacles.len());
        assert!(a.obstacles.iter().all(|ob| ob.center_xy().y.abs() <= 0.5));
    }

    #[test]
    fn zero_spread_gives_floor_count() {
        let w = gen_course(200.0, 3.0, 0.0, 1, &CourseOptions::default()).unwrap();
        assert_eq!(w.obstacles.len(), 66);
        assert!(gen_course(10.0, 1.0, 1.0, 1, &CourseOptions::default()).is_err());
    }

    #[test]
    fn scenario_text_round_trip() {
        let text = "setpoint_speed 1.3\nseed 4\nguidance 0 0 1.5\nguidance 10 1 1.5 # end\n\
                    cylinder 3 0.2 0.2\ncylinder 5 -3 0.2 0 0.7\nbox 7 0 1.5 0.2 0.2 2 \n";
        let s = Scenario::parse(text).unwrap();
        assert_eq!(s.obstacles.len(), 3);
        assert_eq!(s.obstacles[1].velocity, Vector2::new(0.0, 0.7));
        assert_eq!(Scenario::parse(&s.to_text()).unwrap(), s);
        s.world().unwrap();
        assert!(Scenario::parse("cylinder 1 2").is_err());
        assert!(Scenario::parse("wall 1 2 3").is_err());
    }
}
