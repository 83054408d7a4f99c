//! Closed-loop flights of any controller through a world, with metrics.

use mpcc_imitation::controllers::{
    apf_step, mpc_track_solve, mpcc_solve, ApfParams, Avoidance, MpccSolution, MpccWeights, TimedReference,
    TrackingWeights,
};
use mpcc_imitation::dynamics::{step, ControlInput, ModelParams, QuadState};
use mpcc_imitation::geometry::Point3;
use mpcc_imitation::policy::{MlpPolicy, Policy, PolicyError};
use mpcc_imitation::world::{yaw_pd, World, YawGains};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// The run counts as complete within this distance of the guidance end.
pub const COMPLETION_SLACK: f64 = 0.5;

pub enum Controller<'a> {
    Policy(&'a MlpPolicy),
    /// Contouring control along the world guidance, with optional avoidance.
    Mpcc {
        weights: MpccWeights,
        model: ModelParams,
        avoid: Option<f64>,
    },
    Mpc {
        reference: &'a TimedReference,
        weights: TrackingWeights,
        model: ModelParams,
    },
    Apf(ApfParams),
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Policy(_) => "policy",
            Controller::Mpcc { .. } => "mpcc",
            Controller::Mpc { .. } => "mpc",
            Controller::Apf(_) => "apf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlightConfig {
    pub collision_margin: f64,
    pub yaw_gains: YawGains,
    /// Step cap as a multiple of the time the setpoint needs for the course.
    pub cap_factor: f64,
    /// Hard step limit overriding the cap.
    pub max_steps: Option<usize>,
}

impl Default for FlightConfig {
    fn default() -> Self {
        Self {
            collision_margin: 0.3,
            yaw_gains: YawGains::default(),
            cap_factor: 1.5,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlightMetrics {
    /// Progress along the guidance at collision, completion or the cap.
    pub distance: f64,
    pub max_z_deviation: f64,
    pub mean_speed: f64,
    pub collided: bool,
    pub completed: bool,
    pub steps: usize,
    /// Why the run stopped early, if a controller failed.
    pub aborted: Option<String>,
    /// The policy produced NaN or infinite commands.
    pub non_finite_output: bool,
    pub min_clearance: f64,
    pub controller_time_mean: f64,
    pub controller_time_max: f64,
    /// Wall time per step spent outside the controller.
    pub overhead_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub state: QuadState,
    /// Input applied from this state, zero on the last row.
    pub input: ControlInput,
    /// Guidance parameter of the position.
    pub param: f64,
    pub clearance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn positions(&self) -> Vec<Point3> {
        self.rows.iter().map(|r| r.state.position).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "x", "y", "z", "vx", "vy", "roll", "pitch", "yaw", "u_vz", "u_roll", "u_pitch", "u_yaw_rate", "nu",
            "clearance",
        ])?;
        for r in &self.rows {
            let s = r.state.to_vector();
            let u = r.input.to_array();
            let row: Vec<String> = std::iter::once(r.t)
                .chain(s.iter().copied())
                .chain(u)
                .chain([r.param, r.clearance])
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hover at the guidance start facing along it, moving at the setpoint speed.
pub fn course_start(world: &World) -> QuadState {
    let sp = world.setpoint(0.0);
    let mut x = QuadState::at(sp.point, sp.heading);
    let frame = world.guidance.eval(0.0).expect("guidance has a regular tangent");
    x.velocity = frame.tangent.xy().normalize() * world.setpoint_speed;
    x
}

/// Flies `controller` from `start` through `world` until collision, the
/// end of the guidance, or the step cap. Obstacles move with their
/// velocities. Controller errors end the run and are reported in the
/// metrics.
pub fn run_episode(
    controller: &Controller<'_>,
    world: &World,
    plant: &ModelParams,
    start: &QuadState,
    config: &FlightConfig,
) -> (FlightMetrics, Trajectory) {
    let length = world.guidance.length();
    let cap = config
        .max_steps
        .unwrap_or_else(|| (config.cap_factor * length / (world.setpoint_speed * plant.ts)).ceil() as usize);
    let mut world = world.clone();
    let mut x = *start;
    let mut param = world.guidance.closest_point(&x.position, None).param;
    let start_param = param;
    let mut vz = 0.0;
    let mut warm: Option<MpccSolution> = None;
    let mut traj = Trajectory::default();
    let mut metrics = FlightMetrics {
        distance: 0.0,
        max_z_deviation: 0.0,
        mean_speed: 0.0,
        collided: false,
        completed: false,
        steps: 0,
        aborted: None,
        non_finite_output: false,
        min_clearance: world.clearance(&x.position),
        controller_time_mean: 0.0,
        controller_time_max: 0.0,
        overhead_mean: 0.0,
    };
    let mut controller_total = 0.0;
    let mut overhead_total = 0.0;
    let z_deviation = |p: &Point3, nu: f64, w: &World| (p.z - w.guidance.position(nu).z).abs();
    metrics.max_z_deviation = z_deviation(&x.position, param, &world);

    for k in 0..cap {
        let step_started = Instant::now();
        let t = k as f64 * plant.ts;
        let sp = world.setpoint(t);
        let clearance = world.clearance(&x.position);
        let obs = world.observe(&x, t, vz);

        let solve_started = Instant::now();
        let command = match controller {
            Controller::Policy(policy) => policy
                .act(&obs)
                .map(|[uz, roll, pitch]| ControlInput::new(uz, roll, pitch, 0.0))
                .map_err(|e| {
                    metrics.non_finite_output = matches!(e, PolicyError::NonFiniteOutput);
                    e.to_string()
                }),
            Controller::Mpcc { weights, model, avoid } => {
                let hinge = avoid.map(|onset| Avoidance::new(world.obstacles.clone()).with_onset(onset));
                mpcc_solve(&x, param, &world.guidance, weights, model, warm.as_ref(), hinge.as_ref())
                    .map(|s| {
                        let u = s.first_input();
                        warm = Some(s);
                        u
                    })
                    .map_err(|e| e.to_string())
            }
            Controller::Mpc {
                reference,
                weights,
                model,
            } => mpc_track_solve(&x, reference, k, weights, model, warm.as_ref(), None)
                .map(|s| {
                    let u = s.first_input();
                    warm = Some(s);
                    u
                })
                .map_err(|e| e.to_string()),
            Controller::Apf(params) => Ok(apf_step(&x, &world, t, params, plant)),
        };
        let solve_time = solve_started.elapsed().as_secs_f64();
        controller_total += solve_time;
        metrics.controller_time_max = metrics.controller_time_max.max(solve_time);

        let command = match command {
            Ok(u) => u,
            Err(e) => {
                metrics.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let yaw_rate = yaw_pd(&x, sp.heading, &config.yaw_gains, 0.0, plant.input_limits.yaw_rate);
        let u = plant
            .input_limits
            .clip(&ControlInput::new(command.vz, command.roll, command.pitch, yaw_rate));
        traj.rows.push(TrajectoryRow {
            t,
            state: x,
            input: u,
            param,
            clearance,
        });
        x = match step(&x, &u, plant) {
            Ok(next) => next,
            Err(e) => {
                metrics.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        vz = u.vz;
        world = world.advance_obstacles(plant.ts);
        param = world.guidance.closest_point(&x.position, Some(param)).param;
        metrics.steps = k + 1;
        metrics.max_z_deviation = metrics.max_z_deviation.max(z_deviation(&x.position, param, &world));
        metrics.min_clearance = metrics.min_clearance.min(world.clearance(&x.position));
        overhead_total += step_started.elapsed().as_secs_f64() - solve_time;
        if world.collision(&x, config.collision_margin) {
            metrics.collided = true;
            break;
        }
        if param >= length - COMPLETION_SLACK {
            metrics.completed = true;
            break;
        }
    }
    traj.rows.push(TrajectoryRow {
        t: metrics.steps as f64 * plant.ts,
        state: x,
        input: ControlInput::default(),
        param,
        clearance: world.clearance(&x.position),
    });
    metrics.distance = (param - start_param).max(0.0);
    if metrics.steps > 0 {
        let n = metrics.steps as f64;
        metrics.mean_speed = metrics.distance / (n * plant.ts);
        metrics.controller_time_mean = controller_total / n;
        metrics.overhead_mean = overhead_total / n;
    }
    (metrics, traj)
}

/// Distance from `p` to the polyline through `points`.
pub fn polyline_distance(p: &Point3, points: &[Point3]) -> f64 {
    if points.len() == 1 {
        return (p - points[0]).norm();
    }
    points
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            let len2 = d.norm_squared();
            let s = if len2 > 0.0 { ((p - w[0]).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
            (p - (w[0] + d * s)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Sum of squared time-free distances of `flown` from the `truth`
/// polyline, times `scale`, capped at `cap`. Non-finite values hit the cap.
pub fn imitation_error(flown: &[Point3], truth: &[Point3], scale: f64, cap: f64) -> f64 {
    let sum: f64 = flown.iter().map(|p| polyline_distance(p, truth).powi(2)).sum();
    let e = sum * scale;
    if e.is_finite() {
        e.min(cap)
    } else {
        cap
    }
}
