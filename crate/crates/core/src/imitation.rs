//! Example-path heuristics, the aggregated dataset and the learning loop
//! that alternates supervisor-driven and policy-tethered data collection.

use crate::controllers::{
    mpc_track_solve, mpcc_solve, offline_traj_opt, onpolicy_mpcc_solve, ControlError, MpccSolution, MpccWeights,
    PolicyContext, TimedReference, TrackingWeights, TrajOptConfig,
};
use crate::dynamics::{step, ControlInput, DynamicsError, ModelParams, QuadState, STATE_DIM};
use crate::geometry::{GeometryError, Point3, SplinePath};
use crate::policy::{Action, FeatureSet, MlpPolicy, Policy, PolicyError, TrainConfig, ACTION_DIM};
use crate::world::{yaw_pd, Obstacle, World, WorldError, YawGains, OBS_DIM};
use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// Incidence angle, in radians, at which return paths meet the guidance.
pub const MERGE_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
/// Avoidance paths leave the guidance this far before the obstacle.
pub const AVOID_LEAD: f64 = 3.0;
/// Distance from the obstacle center at the abeam point.
pub const AVOID_CLEARANCE: f64 = 1.5;
/// Largest lateral obstacle offset an avoidance path is built for.
pub const AVOID_MAX_OFFSET: f64 = 0.5;
/// Guidance kept before and after a maneuver so the supervisor never sees
/// the end of the path inside its horizon while the maneuver matters.
pub const RUN_OUT: f64 = 6.0;

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("iteration {iteration}: {source}")]
    Collection {
        iteration: usize,
        #[source]
        source: ControlError,
    },
    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: PolicyError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTag {
    ReturnToGuidance,
    ObstacleAvoidance,
}

impl PathTag {
    pub fn name(&self) -> &'static str {
        match self {
            PathTag::ReturnToGuidance => "return",
            PathTag::ObstacleAvoidance => "avoid",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExamplePath {
    pub path: SplinePath,
    pub tag: PathTag,
    /// Obstacles present while the example is flown.
    pub obstacles: Vec<Obstacle>,
}

/// Unit vectors across the guidance at `nu`: horizontal left, then up.
fn guidance_normals(guidance: &SplinePath, nu: f64) -> Result<(Point3, Point3), GeometryError> {
    let frame = guidance.eval(nu)?;
    let (s, c) = frame.heading.sin_cos();
    Ok((Vector3::new(-s, c, 0.0), Vector3::z()))
}

/// Guidance points every metre over `[from, to]`, both ends included.
fn guidance_points(guidance: &SplinePath, from: f64, to: f64) -> Vec<Point3> {
    let n = ((to - from).ceil() as usize).max(1);
    (0..=n)
        .map(|i| guidance.position(from + (to - from) * i as f64 / n as f64))
        .collect()
}

/// Path from `guidance(0) + offset` (lateral, vertical in the guidance
/// frame) that heads straight for the guidance at 45 degrees, merges and
/// then follows it for `RUN_OUT` metres.
pub fn gen_return_path(start_offset: Vector2<f64>, guidance: &SplinePath) -> Result<SplinePath, ImitationError> {
    let size = start_offset.norm();
    if !(size > 0.0 && size.is_finite()) {
        return Err(ImitationError::InvalidExample("return offset must be non-zero".into()));
    }
    let merge = size / MERGE_ANGLE.tan();
    if merge + RUN_OUT > guidance.length() {
        return Err(ImitationError::InvalidExample(format!(
            "guidance of {:.1} m too short for a {size:.2} m offset",
            guidance.length()
        )));
    }
    let (lateral, up) = guidance_normals(guidance, 0.0)?;
    let start = guidance.position(0.0) + lateral * start_offset.x + up * start_offset.y;
    let joint = guidance.position(merge);
    let mut points = vec![start, start + (joint - start) / 3.0, start + (joint - start) * (2.0 / 3.0)];
    points.extend(guidance_points(guidance, merge, merge + RUN_OUT));
    Ok(SplinePath::new(&points)?)
}

/// Path that leaves the guidance `AVOID_LEAD` metres before the obstacle,
/// passes its center at `AVOID_CLEARANCE` on the side away from it and
/// rejoins symmetrically. A centred obstacle is passed on the left for
/// even `seed`, on the right for odd.
pub fn gen_avoid_path(obstacle: &Obstacle, guidance: &SplinePath, seed: u64) -> Result<SplinePath, ImitationError> {
    let center = obstacle.center_xy();
    let probe = Vector3::new(center.x, center.y, guidance.position(0.0).z);
    let at = guidance.closest_point(&probe, None).param;
    let foot = guidance.position(at);
    let (lateral, _) = guidance_normals(guidance, at)?;
    let offset = (center - foot.xy()).dot(&lateral.xy());
    if offset.abs() > AVOID_MAX_OFFSET {
        return Err(ImitationError::InvalidExample(format!(
            "obstacle {offset:.2} m off the guidance, at most {AVOID_MAX_OFFSET} allowed"
        )));
    }
    let lead = 2.0 * AVOID_LEAD;
    if at < lead || at + AVOID_LEAD + RUN_OUT > guidance.length() {
        return Err(ImitationError::InvalidExample("obstacle too close to a guidance end".into()));
    }
    let side = if offset > 1e-9 {
        -1.0
    } else if offset < -1e-9 {
        1.0
    } else if seed % 2 == 0 {
        1.0
    } else {
        -1.0
    };
    let abeam = Vector3::new(center.x, center.y, foot.z) + lateral * (side * AVOID_CLEARANCE);
    let mut points = guidance_points(guidance, at - lead, at - AVOID_LEAD);
    // Keep the departure and rejoin straight so the curve peaks at the abeam point.
    points.retain(|p| (p - guidance.position(at - AVOID_LEAD)).norm() > 1e-9);
    points.push(guidance.position(at - AVOID_LEAD));
    points.push(abeam);
    points.extend(guidance_points(guidance, at + AVOID_LEAD, at + AVOID_LEAD + RUN_OUT));
    Ok(SplinePath::new(&points)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExampleConfig {
    pub guidance_length: f64,
    pub height: f64,
    pub returns: usize,
    pub avoids: usize,
    /// Range of the lateral start offset magnitude of return paths.
    pub lateral_offset: [f64; 2],
    /// Vertical start offsets are drawn from `[-v, v]`.
    pub vertical_offset: f64,
    pub obstacle_radius: f64,
    /// Obstacle offsets across the guidance are drawn from `[-o, o]`.
    pub obstacle_offset: f64,
    /// Distance along the guidance of the avoidance obstacle.
    pub obstacle_distance: f64,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            guidance_length: 30.0,
            height: 1.5,
            returns: 6,
            avoids: 6,
            lateral_offset: [0.5, 2.0],
            vertical_offset: 0.5,
            obstacle_radius: 0.2,
            obstacle_offset: 0.45,
            obstacle_distance: 8.0,
        }
    }
}

/// Straight guidance along +x at the example height.
pub fn training_guidance(config: &ExampleConfig) -> Result<SplinePath, ImitationError> {
    Ok(SplinePath::line(
        Point3::new(0.0, 0.0, config.height),
        Point3::new(config.guidance_length, 0.0, config.height),
    )?)
}

#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub guidance: SplinePath,
    pub examples: Vec<ExamplePath>,
}

impl ExampleSet {
    pub fn new(guidance: SplinePath, examples: Vec<ExamplePath>) -> Result<Self, ImitationError> {
        let set = Self { guidance, examples };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ImitationError> {
        if self.examples.len() < 3 {
            return Err(ImitationError::InvalidExample(format!(
                "{} example paths, at least 3 needed",
                self.examples.len()
            )));
        }
        for (i, e) in self.examples.iter().enumerate() {
            if e.tag != PathTag::ObstacleAvoidance {
                continue;
            }
            for o in &e.obstacles {
                let c = o.center_xy();
                let z = e.path.position(0.0).z;
                let d = e.path.closest_point(&Vector3::new(c.x, c.y, z), None).distance;
                if d < AVOID_CLEARANCE - 0.05 {
                    return Err(ImitationError::InvalidExample(format!(
                        "example {i} passes {d:.3} m from an obstacle center"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Return paths from the given offsets only.
    pub fn returns(guidance: SplinePath, offsets: &[Vector2<f64>]) -> Result<Self, ImitationError> {
        let examples = offsets
            .iter()
            .map(|o| {
                Ok(ExamplePath {
                    path: gen_return_path(*o, &guidance)?,
                    tag: PathTag::ReturnToGuidance,
                    obstacles: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>, ImitationError>>()?;
        Self::new(guidance, examples)
    }

    /// Random return and avoidance examples on the straight training guidance.
    pub fn generate(config: &ExampleConfig, rng: &mut impl Rng) -> Result<Self, ImitationError> {
        let guidance = training_guidance(config)?;
        let mut examples = Vec::with_capacity(config.returns + config.avoids);
        let [lo, hi] = config.lateral_offset;
        if !(lo > 0.0 && hi >= lo) {
            return Err(ImitationError::Config("lateral offset range must be positive".into()));
        }
        for _ in 0..config.returns {
            let lateral = rng.random_range(lo..=hi) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let vertical = rng.random_range(-config.vertical_offset..=config.vertical_offset);
            examples.push(ExamplePath {
                path: gen_return_path(Vector2::new(lateral, vertical), &guidance)?,
                tag: PathTag::ReturnToGuidance,
                obstacles: Vec::new(),
            });
        }
        for i in 0..config.avoids {
            let offset = rng.random_range(-config.obstacle_offset..=config.obstacle_offset);
            let obstacle = Obstacle::cylinder(config.obstacle_distance, offset, config.obstacle_radius);
            examples.push(ExamplePath {
                path: gen_avoid_path(&obstacle, &guidance, i as u64)?,
                tag: PathTag::ObstacleAvoidance,
                obstacles: vec![obstacle],
            });
        }
        Self::new(guidance, examples)
    }

    pub fn world(&self, index: usize, setpoint_speed: f64) -> Result<World, ImitationError> {
        Ok(World::new(
            self.guidance.clone(),
            self.examples[index].obstacles.clone(),
            setpoint_speed,
        )?)
    }
}

/// Where an example episode starts: at the path start, moving along it at
/// the setpoint speed, facing the guidance heading.
pub fn start_state(path: &SplinePath, world: &World) -> Result<QuadState, ImitationError> {
    let frame = path.eval(0.0)?;
    let mut x = QuadState::at(frame.point, world.setpoint(0.0).heading);
    x.velocity = frame.tangent.xy().normalize() * world.setpoint_speed;
    Ok(x)
}

/// Root-mean-square and largest distance of `trajectory` from `path`.
pub fn path_deviation(trajectory: &[QuadState], path: &SplinePath) -> (f64, f64) {
    if trajectory.is_empty() {
        return (0.0, 0.0);
    }
    let mut hint = None;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for x in trajectory {
        let p = path.closest_point(&x.position, hint);
        hint = Some(p.param);
        sum += p.distance * p.distance;
        max = max.max(p.distance);
    }
    ((sum / trajectory.len() as f64).sqrt(), max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OffPolicy,
    OnPolicy,
    Augmented,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::OffPolicy => "off_policy",
            Provenance::OnPolicy => "on_policy",
            Provenance::Augmented => "augmented",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Provenance::OffPolicy => 0,
            Provenance::OnPolicy => 1,
            Provenance::Augmented => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Provenance::OffPolicy),
            1 => Some(Provenance::OnPolicy),
            2 => Some(Provenance::Augmented),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: [f64; OBS_DIM],
    /// `[v_z, roll_d, pitch_d]` chosen by the supervisor.
    pub target: Action,
    pub provenance: Provenance,
    pub episode: u32,
    /// Index of the real sample an augmented one was derived from.
    pub parent: Option<usize>,
    /// Control step within the episode; observations are taken at `step * ts`.
    pub step: u32,
    pub state: QuadState,
    /// Path parameter the label was computed at.
    pub param: f64,
    /// Vertical velocity fed to the observation.
    pub vz: f64,
}

/// Append-only sample store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
}

const BINARY_MAGIC: &[u8; 8] = b"MPCCDS01";

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn push(&mut self, sample: Sample) {
        self.samples.push(sample);
    }

    /// Appends `other`, rebasing its parent indices.
    pub fn append(&mut self, other: &Dataset) {
        let base = self.samples.len();
        self.samples.extend(other.samples.iter().map(|s| Sample {
            parent: s.parent.map(|p| p + base),
            ..s.clone()
        }));
    }

    pub fn inputs(&self, features: FeatureSet) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.features[..features.dim()].to_vec())
            .collect()
    }

    pub fn targets(&self) -> Vec<Action> {
        self.samples.iter().map(|s| s.target).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ImitationError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["provenance".to_string(), "episode".to_string()];
        header.extend((0..OBS_DIM).map(|i| format!("o{i}")));
        header.extend(["u_vz", "u_roll", "u_pitch"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.provenance.name().to_string(), s.episode.to_string()];
            row.extend(s.features.iter().map(|v| format!("{v:?}")));
            row.extend(s.target.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<(), ImitationError> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            out.write_all(&[s.provenance.code()])?;
            out.write_all(&s.episode.to_le_bytes())?;
            out.write_all(&s.parent.map_or(u64::MAX, |p| p as u64).to_le_bytes())?;
            out.write_all(&s.step.to_le_bytes())?;
            let state = s.state.to_vector();
            let tail = [s.param, s.vz];
            let floats = s.features.iter().chain(&s.target).chain(state.iter()).chain(&tail);
            for v in floats {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, ImitationError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(ImitationError::Format("not a dataset file".into()));
        }
        let count = read_u64(&mut input)? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut code = [0u8; 1];
            input.read_exact(&mut code)?;
            let provenance =
                Provenance::from_code(code[0]).ok_or_else(|| ImitationError::Format("unknown provenance".into()))?;
            let mut word = [0u8; 4];
            input.read_exact(&mut word)?;
            let episode = u32::from_le_bytes(word);
            let parent = match read_u64(&mut input)? {
                u64::MAX => None,
                p => Some(p as usize),
            };
            input.read_exact(&mut word)?;
            let step = u32::from_le_bytes(word);
            let mut floats = [0.0; OBS_DIM + ACTION_DIM + STATE_DIM + 2];
            for v in floats.iter_mut() {
                *v = f64::from_le_bytes(read_u64(&mut input)?.to_le_bytes());
            }
            let mut features = [0.0; OBS_DIM];
            features.copy_from_slice(&floats[..OBS_DIM]);
            let mut target = [0.0; ACTION_DIM];
            target.copy_from_slice(&floats[OBS_DIM..OBS_DIM + ACTION_DIM]);
            let at = OBS_DIM + ACTION_DIM;
            let state = QuadState::from_vector(&nalgebra::SVector::<f64, STATE_DIM>::from_column_slice(
                &floats[at..at + STATE_DIM],
            ));
            samples.push(Sample {
                features,
                target,
                provenance,
                episode,
                parent,
                step,
                state,
                param: floats[at + STATE_DIM],
                vz: floats[at + STATE_DIM + 1],
            });
        }
        Ok(Self { samples })
    }
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64, ImitationError> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// What the supervisor follows during an episode.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    /// Time-free contouring control along an example path.
    Path(&'a SplinePath),
    /// Time-indexed tracking of an offline reference.
    Reference(&'a TimedReference),
}

/// Supervisor of one episode: what it follows, its internal model and the
/// weights it labels and explores with.
#[derive(Debug, Clone, Copy)]
pub struct Supervisor<'a> {
    pub teacher: Teacher<'a>,
    pub model: &'a ModelParams,
    pub label: &'a MpccWeights,
    pub explore: &'a MpccWeights,
    pub tracking: &'a TrackingWeights,
}

impl Supervisor<'_> {
    /// Path parameter of `p`, searched near `hint`.
    pub fn param(&self, p: &Point3, hint: Option<f64>) -> f64 {
        match self.teacher {
            Teacher::Path(path) => path.closest_point(p, hint).param,
            Teacher::Reference(_) => 0.0,
        }
    }

    /// Label for `state` at control step `k`.
    pub fn solve(
        &self,
        state: &QuadState,
        k: usize,
        param: f64,
        warm: Option<&MpccSolution>,
    ) -> Result<MpccSolution, ControlError> {
        match self.teacher {
            Teacher::Path(path) => mpcc_solve(state, param, path, self.label, self.model, warm, None),
            Teacher::Reference(r) => mpc_track_solve(state, r, k, self.tracking, self.model, warm, None),
        }
    }

    /// Exploration input that follows the policy while staying tethered.
    pub fn explore(
        &self,
        state: &QuadState,
        k: usize,
        param: f64,
        warm: Option<&MpccSolution>,
        ctx: &PolicyContext<'_>,
    ) -> Result<MpccSolution, ControlError> {
        match self.teacher {
            Teacher::Path(path) => onpolicy_mpcc_solve(state, param, path, self.explore, self.model, ctx, warm),
            Teacher::Reference(r) => mpc_track_solve(state, r, k, self.tracking, self.model, warm, Some(ctx)),
        }
    }

    fn length(&self) -> f64 {
        match self.teacher {
            Teacher::Path(path) => path.length(),
            Teacher::Reference(r) => r
                .states
                .windows(2)
                .map(|w| (w[1].position - w[0].position).norm())
                .sum(),
        }
    }

    /// The episode is over once the horizon would look past the end of
    /// what is being followed.
    fn finished(&self, k: usize, param: f64) -> bool {
        match self.teacher {
            Teacher::Path(path) => {
                let preview = self.label.horizon as f64 * self.model.ts * self.label.max_progress_rate;
                param >= path.length() - preview
            }
            Teacher::Reference(r) => k + self.tracking.horizon + 1 >= r.states.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub collision_margin: f64,
    pub yaw_gains: YawGains,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            collision_margin: 0.3,
            yaw_gains: YawGains::default(),
        }
    }
}

/// One data-collection episode.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Real samples, labelled.
    pub shard: Dataset,
    /// Supervisor solution behind each label, used to warm-start augmentation.
    pub labels: Vec<MpccSolution>,
    /// Every visited state, starting with the initial one.
    pub trajectory: Vec<QuadState>,
    pub collided: bool,
    pub min_clearance: f64,
    /// Labels whose solve stopped before the stationarity tolerance.
    pub non_converged: usize,
    /// A solver or policy error cut the episode short.
    pub failed: Option<String>,
}

/// Who drives the plant during collection.
enum Driver<'a> {
    Supervisor,
    Tethered(&'a dyn Policy),
    Raw(&'a dyn Policy),
}

fn run_episode(
    sup: &Supervisor<'_>,
    driver: Driver<'_>,
    start: &QuadState,
    plant: &ModelParams,
    world: &World,
    config: &EpisodeConfig,
    episode: u32,
) -> Result<Episode, ImitationError> {
    plant.validate()?;
    let cap = (1.5 * sup.length() / (world.setpoint_speed * plant.ts)).ceil() as usize;
    let provenance = match driver {
        Driver::Supervisor => Provenance::OffPolicy,
        _ => Provenance::OnPolicy,
    };
    let mut out = Episode {
        shard: Dataset::new(),
        labels: Vec::new(),
        trajectory: vec![*start],
        collided: false,
        min_clearance: world.clearance(&start.position),
        non_converged: 0,
        failed: None,
    };
    let mut x = *start;
    let mut param = sup.param(&x.position, None);
    let mut vz = 0.0;
    let mut warm: Option<MpccSolution> = None;
    for k in 0..cap {
        let t = k as f64 * plant.ts;
        if sup.finished(k, param) || world.setpoint_speed * t >= sup.length() {
            break;
        }
        let obs = world.observe(&x, t, vz);
        let command = match driver {
            Driver::Supervisor => sup.solve(&x, k, param, warm.as_ref()).map(|s| {
                let u = s.first_input();
                out.non_converged += usize::from(!s.converged);
                out.labels.push(s.clone());
                warm = Some(s);
                u
            }),
            Driver::Tethered(policy) => {
                let ctx = PolicyContext {
                    policy,
                    world,
                    time: t,
                    vz,
                    yaw_gains: config.yaw_gains,
                };
                sup.explore(&x, k, param, warm.as_ref(), &ctx).map(|s| {
                    let u = s.first_input();
                    warm = Some(s);
                    u
                })
            }
            Driver::Raw(policy) => policy
                .act(&obs)
                .map(|[uz, roll, pitch]| ControlInput::new(uz, roll, pitch, 0.0))
                .map_err(ControlError::from),
        };
        let command = match command {
            Ok(u) => u,
            Err(e) => {
                out.failed = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let heading = world.setpoint(t).heading;
        let yaw_rate = yaw_pd(&x, heading, &config.yaw_gains, 0.0, plant.input_limits.yaw_rate);
        let u = plant
            .input_limits
            .clip(&ControlInput::new(command.vz, command.roll, command.pitch, yaw_rate));
        out.shard.push(Sample {
            features: obs.to_features(),
            target: [u.vz, u.roll, u.pitch],
            provenance,
            episode,
            parent: None,
            step: k as u32,
            state: x,
            param,
            vz,
        });
        x = step(&x, &u, plant)?;
        vz = u.vz;
        out.trajectory.push(x);
        out.min_clearance = out.min_clearance.min(world.clearance(&x.position));
        if world.collision(&x, config.collision_margin) {
            out.collided = true;
            break;
        }
        param = sup.param(&x.position, Some(param));
    }
    Ok(out)
}

/// Relabels every sample of `episode` with the supervisor, in order, each
/// solve warm-started from the previous one. Samples after a failed solve
/// are dropped.
fn relabel(sup: &Supervisor<'_>, episode: &mut Episode) {
    let mut warm: Option<MpccSolution> = None;
    let mut kept = Dataset::new();
    episode.labels.clear();
    episode.non_converged = 0;
    for s in episode.shard.samples() {
        match sup.solve(&s.state, s.step as usize, s.param, warm.as_ref()) {
            Ok(sol) => {
                let u = sup.model.input_limits.clip(&sol.first_input());
                episode.non_converged += usize::from(!sol.converged);
                kept.push(Sample {
                    target: [u.vz, u.roll, u.pitch],
                    ..s.clone()
                });
                episode.labels.push(sol.clone());
                warm = Some(sol);
            }
            Err(e) => {
                episode.failed.get_or_insert(format!("label at step {}: {e}", s.step));
                break;
            }
        }
    }
    episode.shard = kept;
}

/// Supervisor-driven episode. Every applied input is also the label.
pub fn collect_off_policy(
    sup: &Supervisor<'_>,
    start: &QuadState,
    plant: &ModelParams,
    world: &World,
    config: &EpisodeConfig,
    episode: u32,
) -> Result<Episode, ImitationError> {
    let mut ep = run_episode(sup, Driver::Supervisor, start, plant, world, config, episode)?;
    // The applied yaw rate comes from the heading loop; the label keeps the
    // supervisor's three other channels, clipped like the applied input.
    for (s, sol) in ep.shard.samples.iter_mut().zip(&ep.labels) {
        let u = sup.model.input_limits.clip(&sol.first_input());
        s.target = [u.vz, u.roll, u.pitch];
    }
    Ok(ep)
}

/// Episode driven by the on-policy supervisor, which follows `policy`
/// while tethered to the example. Labels are computed afterwards by the
/// plain supervisor at each recorded state.
pub fn collect_on_policy(
    sup: &Supervisor<'_>,
    policy: &dyn Policy,
    start: &QuadState,
    plant: &ModelParams,
    world: &World,
    config: &EpisodeConfig,
    episode: u32,
) -> Result<Episode, ImitationError> {
    let mut ep = run_episode(sup, Driver::Tethered(policy), start, plant, world, config, episode)?;
    relabel(sup, &mut ep);
    Ok(ep)
}

/// Episode flown by the raw policy with no safety tether, labelled
/// afterwards like `collect_on_policy`.
pub fn collect_unsafe(
    sup: &Supervisor<'_>,
    policy: &dyn Policy,
    start: &QuadState,
    plant: &ModelParams,
    world: &World,
    config: &EpisodeConfig,
    episode: u32,
) -> Result<Episode, ImitationError> {
    let mut ep = run_episode(sup, Driver::Raw(policy), start, plant, world, config, episode)?;
    relabel(sup, &mut ep);
    Ok(ep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Noisy copies per real sample.
    pub copies: usize,
    pub position_std: f64,
    pub velocity_std: f64,
    /// Applied to yaw only.
    pub angle_std: f64,
    /// Noise on the measured climb rate. Labels do not depend on it, but
    /// it is correlated with them along a flight; without noise the policy
    /// learns to echo its previous command.
    pub vz_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            copies: 3,
            position_std: 0.1,
            velocity_std: 0.1,
            angle_std: 0.05,
            vz_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Augmented {
    /// Noisy samples only; parents index the episode shard.
    pub shard: Dataset,
    /// Perturbed states whose solve failed.
    pub dropped: usize,
}

/// Adds `config.copies` supervisor-labelled samples around every real
/// sample of `episode`. Observations are recomputed at the perturbed state.
pub fn augment(
    episode: &Episode,
    sup: &Supervisor<'_>,
    world: &World,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Augmented, ImitationError> {
    let stds = [config.position_std, config.velocity_std, config.angle_std, config.vz_std];
    if stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(ImitationError::Config("noise deviations must be non-negative".into()));
    }
    let normal = |s: f64| Normal::new(0.0, s).expect("finite non-negative deviation");
    let (np, nv, na) = (normal(config.position_std), normal(config.velocity_std), normal(config.angle_std));
    let nz = normal(config.vz_std);
    let mut out = Augmented::default();
    for (i, (s, label)) in episode.shard.samples().iter().zip(&episode.labels).enumerate() {
        for _ in 0..config.copies {
            let mut w = [0.0; STATE_DIM];
            for (j, v) in w.iter_mut().enumerate() {
                // Roll and pitch are invisible to the policy; perturbing them
                // would only add label noise it cannot explain.
                *v = match j {
                    0..=2 => np.sample(rng),
                    3..=4 => nv.sample(rng),
                    7 => na.sample(rng),
                    _ => 0.0,
                };
            }
            let target;
            let perturbed;
            let mut param = s.param;
            if w.iter().all(|v| *v == 0.0) {
                // Identical state, identical label.
                perturbed = s.state;
                target = s.target;
            } else {
                let v = s.state.to_vector() + nalgebra::SVector::<f64, STATE_DIM>::from_column_slice(&w);
                perturbed = sup.model.state_limits.clamp(&QuadState::from_vector(&v));
                param = sup.param(&perturbed.position, Some(s.param));
                match sup.solve(&perturbed, s.step as usize, param, Some(&label.unshifted())) {
                    Ok(sol) => {
                        let u = sup.model.input_limits.clip(&sol.first_input());
                        target = [u.vz, u.roll, u.pitch];
                    }
                    Err(_) => {
                        out.dropped += 1;
                        continue;
                    }
                }
            }
            let limit = sup.model.input_limits.vz;
            let vz = (s.vz + nz.sample(rng)).clamp(-limit, limit);
            let obs = world.observe(&perturbed, s.step as f64 * sup.model.ts, vz);
            out.shard.push(Sample {
                features: obs.to_features(),
                target,
                provenance: Provenance::Augmented,
                episode: s.episode,
                parent: Some(i),
                step: s.step,
                state: perturbed,
                param,
                vz,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisorKind {
    #[default]
    Mpcc,
    /// Time-indexed tracking of offline references.
    Mpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// On-policy steps follow the policy through the tethered supervisor.
    #[default]
    Safe,
    /// On-policy steps fly the raw policy.
    Unsafe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub supervisor: SupervisorKind,
    pub exploration: Exploration,
    /// Weights of the labelling supervisor.
    pub mpcc: MpccWeights,
    /// Weights of the on-policy supervisor.
    pub explore: MpccWeights,
    pub tracking: TrackingWeights,
    pub traj_opt: TrajOptConfig,
    pub train: TrainConfig,
    /// Epochs for each retraining after the first.
    pub retrain_epochs: usize,
    pub augment: AugmentConfig,
    pub episode: EpisodeConfig,
    pub features: FeatureSet,
    pub hidden_layers: Vec<usize>,
    pub setpoint_speed: f64,
    /// Off-policy episodes before the first training.
    pub initial_episodes: usize,
    /// Caps how many of the remaining examples the loop visits.
    pub max_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        let speed = 1.3;
        Self {
            supervisor: SupervisorKind::Mpcc,
            exploration: Exploration::Safe,
            mpcc: MpccWeights {
                max_progress_rate: speed,
                ..MpccWeights::default()
            },
            explore: MpccWeights {
                max_progress_rate: speed,
                ..MpccWeights::on_policy()
            },
            tracking: TrackingWeights::default(),
            traj_opt: TrajOptConfig::default(),
            train: TrainConfig::default(),
            retrain_epochs: 100,
            augment: AugmentConfig::default(),
            episode: EpisodeConfig::default(),
            features: FeatureSet::Full,
            hidden_layers: vec![30, 30],
            setpoint_speed: speed,
            initial_episodes: 2,
            max_iterations: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initial,
    OffPolicy,
    OnPolicy,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Initial => "initial",
            Phase::OffPolicy => "off_policy",
            Phase::OnPolicy => "on_policy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub phase: Phase,
    pub example: usize,
    pub tag: PathTag,
    pub real_samples: usize,
    pub augmented_samples: usize,
    pub dropped: usize,
    pub dataset_size: usize,
    /// Training loss after this iteration, NaN before the first training.
    pub loss: f64,
    pub rms_deviation: f64,
    pub max_deviation: f64,
    pub min_clearance: f64,
    pub collided: bool,
    pub non_converged: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnReport {
    pub seed: u64,
    pub iterations: Vec<IterationReport>,
}

impl LearnReport {
    pub fn collisions(&self) -> usize {
        self.iterations.iter().filter(|r| r.collided).count()
    }

    /// Smallest obstacle clearance seen in any on-policy episode.
    pub fn on_policy_clearance(&self) -> f64 {
        self.iterations
            .iter()
            .filter(|r| r.phase == Phase::OnPolicy)
            .map(|r| r.min_clearance)
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean RMS distance from the example path over on-policy episodes.
    pub fn train_deviation(&self) -> f64 {
        let on: Vec<f64> = self
            .iterations
            .iter()
            .filter(|r| r.phase == Phase::OnPolicy)
            .map(|r| r.rms_deviation)
            .collect();
        if on.is_empty() {
            0.0
        } else {
            on.iter().sum::<f64>() / on.len() as f64
        }
    }

    pub fn final_loss(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ImitationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "seed",
            "iteration",
            "phase",
            "example",
            "tag",
            "real_samples",
            "augmented_samples",
            "dropped",
            "dataset_size",
            "loss",
            "rms_deviation",
            "max_deviation",
            "min_clearance",
            "collided",
            "non_converged",
            "failed",
        ])?;
        for r in &self.iterations {
            w.write_record([
                self.seed.to_string(),
                r.iteration.to_string(),
                r.phase.name().to_string(),
                r.example.to_string(),
                r.tag.name().to_string(),
                r.real_samples.to_string(),
                r.augmented_samples.to_string(),
                r.dropped.to_string(),
                r.dataset_size.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.rms_deviation),
                format!("{:?}", r.max_deviation),
                format!("{:?}", r.min_clearance),
                r.collided.to_string(),
                r.non_converged.to_string(),
                r.failed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Guidance from the start of `example` to its end, sampled every metre.
fn guidance_section(guidance: &SplinePath, example: &SplinePath) -> Result<SplinePath, ImitationError> {
    let from = guidance.closest_point(&example.position(0.0), None).param;
    let to = guidance.closest_point(&example.position(example.length()), None).param;
    Ok(SplinePath::new(&guidance_points(guidance, from, to))?)
}

/// Offline reference the tracking supervisor follows for each example:
/// the example itself for return paths, the guidance with the obstacles
/// for avoidance examples.
pub fn tracking_references(
    examples: &ExampleSet,
    model: &ModelParams,
    config: &LearnConfig,
) -> Result<Vec<TimedReference>, ImitationError> {
    examples
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let path = match e.tag {
                PathTag::ReturnToGuidance => e.path.clone(),
                PathTag::ObstacleAvoidance => guidance_section(&examples.guidance, &e.path)?,
            };
            offline_traj_opt(&path, &e.obstacles, config.setpoint_speed, model, &config.traj_opt)
                .map_err(|source| ImitationError::Collection { iteration: i, source })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LearnOutput {
    pub policy: MlpPolicy,
    pub report: LearnReport,
    pub dataset: Dataset,
}

/// Runs the full learning algorithm: a few supervisor-driven episodes on
/// return paths and a first training, then alternating off-policy and
/// on-policy episodes over the remaining examples, augmenting and
/// retraining after each.
pub fn learn(
    examples: &ExampleSet,
    plant: &ModelParams,
    sup_model: &ModelParams,
    config: &LearnConfig,
) -> Result<LearnOutput, ImitationError> {
    examples.validate()?;
    plant.validate()?;
    if config.initial_episodes == 0 || config.initial_episodes >= examples.examples.len() {
        return Err(ImitationError::Config(
            "initial episodes must be at least one and leave examples for the loop".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let references = match config.supervisor {
        SupervisorKind::Mpcc => Vec::new(),
        SupervisorKind::Mpc => tracking_references(examples, sup_model, config)?,
    };

    // Initial paths are drawn among return paths when there are enough.
    let mut returns: Vec<usize> = (0..examples.examples.len())
        .filter(|&i| examples.examples[i].tag == PathTag::ReturnToGuidance)
        .collect();
    let mut others: Vec<usize> = (0..examples.examples.len())
        .filter(|&i| examples.examples[i].tag != PathTag::ReturnToGuidance)
        .collect();
    returns.shuffle(&mut rng);
    let mut order = returns;
    if order.len() < config.initial_episodes {
        others.shuffle(&mut rng);
        order.append(&mut others);
    } else {
        let rest = order.split_off(config.initial_episodes);
        let mut tail: Vec<usize> = rest.into_iter().chain(others).collect();
        tail.shuffle(&mut rng);
        order.extend(tail);
    }
    let initial: Vec<usize> = order[..config.initial_episodes].to_vec();
    let mut remaining: Vec<usize> = order[config.initial_episodes..].to_vec();
    if let Some(cap) = config.max_iterations {
        remaining.truncate(cap);
    }

    let mut policy = MlpPolicy::with_layers(
        &[&[config.features.dim()], config.hidden_layers.as_slice(), &[ACTION_DIM]].concat(),
        config.features,
        rng.next_u64(),
    );
    let mut data = Dataset::new();
    let mut report = LearnReport {
        seed: config.seed,
        iterations: Vec::new(),
    };

    let schedule = initial
        .iter()
        .map(|&i| (i, Phase::Initial))
        .chain(remaining.iter().enumerate().map(|(j, &i)| {
            let phase = if j % 2 == 0 { Phase::OffPolicy } else { Phase::OnPolicy };
            (i, phase)
        }));
    for (iteration, (index, phase)) in schedule.enumerate() {
        let example = &examples.examples[index];
        let world = examples.world(index, config.setpoint_speed)?;
        let teacher = match config.supervisor {
            SupervisorKind::Mpcc => Teacher::Path(&example.path),
            SupervisorKind::Mpc => Teacher::Reference(&references[index]),
        };
        let sup = Supervisor {
            teacher,
            model: sup_model,
            label: &config.mpcc,
            explore: &config.explore,
            tracking: &config.tracking,
        };
        let start = start_state(&example.path, &world)?;
        let episode_id = iteration as u32;
        let episode = match (phase, config.exploration) {
            (Phase::OnPolicy, Exploration::Safe) => {
                collect_on_policy(&sup, &policy, &start, plant, &world, &config.episode, episode_id)?
            }
            (Phase::OnPolicy, Exploration::Unsafe) => {
                collect_unsafe(&sup, &policy, &start, plant, &world, &config.episode, episode_id)?
            }
            _ => collect_off_policy(&sup, &start, plant, &world, &config.episode, episode_id)?,
        };
        let noisy = augment(&episode, &sup, &world, &config.augment, &mut rng)?;
        let mut shard = episode.shard.clone();
        shard.append(&noisy.shard);
        data.append(&shard);

        let last_initial = phase == Phase::Initial && iteration + 1 == config.initial_episodes;
        let mut loss = f64::NAN;
        if last_initial || phase != Phase::Initial {
            let inputs = data.inputs(config.features);
            policy.fit_normalization(&inputs);
            let train = TrainConfig {
                epochs: if last_initial { config.train.epochs } else { config.retrain_epochs },
                seed: rng.next_u64(),
                ..config.train
            };
            let trained = policy
                .train(&inputs, &data.targets(), &train)
                .map_err(|source| ImitationError::Training { iteration, source })?;
            loss = trained.final_loss;
        }
        let (rms, max) = path_deviation(&episode.trajectory, &example.path);
        report.iterations.push(IterationReport {
            iteration,
            phase,
            example: index,
            tag: example.tag,
            real_samples: episode.shard.len(),
            augmented_samples: noisy.shard.len(),
            dropped: noisy.dropped,
            dataset_size: data.len(),
            loss,
            rms_deviation: rms,
            max_deviation: max,
            min_clearance: episode.min_clearance,
            collided: episode.collided,
            non_converged: episode.non_converged,
            failed: episode.failed.is_some(),
        });
    }
    Ok(LearnOutput {
        policy,
        report,
        dataset: data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn guidance() -> SplinePath {
        training_guidance(&ExampleConfig::default()).unwrap()
    }

    #[test]
    fn return_path_merges_at_45_degrees() {
        let g = guidance();
        let path = gen_return_path(Vector2::new(1.0, 0.0), &g).unwrap();
        let start = path.position(0.0);
        assert_abs_diff_eq!(start, Vector3::new(0.0, 1.0, 1.5), epsilon = 1e-12);
        // The first straight segment heads for the guidance point 1 m downstream.
        let p = path.position(0.5);
        assert_abs_diff_eq!(p.x, 1.0 - p.y, epsilon = 0.02);
        let merge = path.closest_point(&Vector3::new(1.0, 0.0, 1.5), None);
        assert!(merge.distance < 1e-9);
        for i in 0..=100 {
            let q = path.position(path.length() * i as f64 / 100.0);
            assert_abs_diff_eq!(q.z, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn return_path_rejects_zero_offset() {
        assert!(gen_return_path(Vector2::zeros(), &guidance()).is_err());
    }

    #[test]
    fn avoidance_path_passes_at_prescribed_distance() {
        let g = guidance();
        for (offset, seed) in [(0.0, 0), (0.0, 1), (0.3, 0), (-0.45, 7)] {
            let o = Obstacle::cylinder(8.0, offset, 0.2);
            let path = gen_avoid_path(&o, &g, seed).unwrap();
            let center = Vector3::new(8.0, offset, 1.5);
            let d = path.closest_point(&center, None).distance;
            assert!((d - AVOID_CLEARANCE).abs() < 0.05, "offset {offset}: {d}");
            // Departure 3 m before the obstacle.
            let start = path.position(0.0);
            assert_abs_diff_eq!(start.x, 2.0, epsilon = 1e-9);
            let abeam = path.position(path.closest_point(&center, None).param);
            if offset != 0.0 {
                assert!(abeam.y.signum() == -offset.signum());
            }
        }
        let o = Obstacle::cylinder(8.0, 0.0, 0.2);
        let left = gen_avoid_path(&o, &g, 0).unwrap();
        let right = gen_avoid_path(&o, &g, 1).unwrap();
        let mid = |p: &SplinePath| p.position(p.closest_point(&Vector3::new(8.0, 0.0, 1.5), None).param).y;
        assert!(mid(&left) > 1.0 && mid(&right) < -1.0);
    }

    #[test]
    fn avoidance_rejects_far_obstacle() {
        assert!(gen_avoid_path(&Obstacle::cylinder(8.0, 0.8, 0.2), &guidance(), 0).is_err());
    }

    #[test]
    fn generated_set_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = ExampleSet::generate(&ExampleConfig::default(), &mut rng).unwrap();
        assert_eq!(set.examples.len(), 12);
        assert!(ExampleSet::new(set.guidance.clone(), set.examples[..2].to_vec()).is_err());
    }

    fn sample(i: usize) -> Sample {
        let mut features = [0.0; OBS_DIM];
        features[0] = i as f64 * 0.1;
        features[7] = 1.0 / 3.0;
        Sample {
            features,
            target: [0.1, -0.2, 1e-17],
            provenance: if i % 2 == 0 { Provenance::OffPolicy } else { Provenance::Augmented },
            episode: 4,
            parent: if i % 2 == 0 { None } else { Some(i - 1) },
            step: i as u32,
            state: QuadState::at(Vector3::new(1.0, 2.0, 3.0), 0.25),
            param: 0.7,
            vz: -0.1,
        }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let mut d = Dataset::new();
        for i in 0..5 {
            d.push(sample(i));
        }
        let mut buf = Vec::new();
        d.write_binary(&mut buf).unwrap();
        assert_eq!(Dataset::read_binary(buf.as_slice()).unwrap(), d);
        assert!(Dataset::read_binary(&buf[1..]).is_err());
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let mut d = Dataset::new();
        for i in 0..3 {
            d.push(sample(i));
        }
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 2 + OBS_DIM + ACTION_DIM);
        assert!(lines[2].starts_with("augmented,4,"));
    }

    #[test]
    fn append_rebases_parents() {
        let mut a = Dataset::new();
        a.push(sample(0));
        a.push(sample(1));
        let mut d = Dataset::new();
        d.append(&a);
        d.append(&a);
        assert_eq!(d.samples()[3].parent, Some(2));
    }
}
