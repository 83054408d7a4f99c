//! The comparative studies. Each returns a typed summary plus the CSV
//! table it is reported in; independent cells run on a rayon pool and
//! results are assembled in a fixed order, so the tables only depend on
//! the configuration.

use crate::config::ExperimentConfig;
use crate::episode::{course_start, imitation_error, run_episode, Controller, FlightConfig, FlightMetrics};
use crate::report::{Table, Value};
use crate::scenario::{empty_course, gen_course, CourseOptions, ScenarioError};
use mpcc_imitation::controllers::ApfParams;
use mpcc_imitation::dynamics::{perturb_params, DynamicsError};
use mpcc_imitation::geometry::Point3;
use mpcc_imitation::imitation::{
    learn, path_deviation, start_state, training_guidance, ExampleConfig, ExampleSet, Exploration, ImitationError,
    LearnConfig, LearnOutput, SupervisorKind,
};
use mpcc_imitation::policy::{MlpPolicy, Policy, PolicyError, ACTION_DIM};
use mpcc_imitation::world::{Observation, Obstacle, World};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Imitation(#[from] ImitationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Deterministic sub-seed for one cell of an experiment.
pub fn sub_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Runs `f` over `items` on `jobs` threads, keeping input order.
fn parallel<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn course_options(config: &ExperimentConfig) -> CourseOptions {
    CourseOptions {
        height: config.examples.height,
        radius: config.examples.obstacle_radius,
        setpoint_speed: config.learn.setpoint_speed,
        ..CourseOptions::default()
    }
}

/// A course of the given spacing, or the empty course for `[0, 0]`.
pub fn density_course(length: f64, spacing: [f64; 2], seed: u64, options: &CourseOptions) -> Result<World> {
    if spacing == [0.0, 0.0] {
        Ok(empty_course(length, options)?)
    } else {
        Ok(gen_course(length, spacing[0], spacing[1], seed, options)?)
    }
}

pub fn examples_for(config: &ExampleConfig, seed: u64) -> Result<ExampleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ExampleSet::generate(config, &mut rng)?)
}

/// Trains a policy on examples drawn from `seed`, with the plant as the
/// supervisor model.
pub fn train_policy(config: &ExperimentConfig, learn_config: &LearnConfig, seed: u64) -> Result<LearnOutput> {
    let examples = examples_for(&config.examples, seed)?;
    let cfg = LearnConfig {
        seed,
        ..learn_config.clone()
    };
    Ok(learn(&examples, &config.model, &config.model, &cfg)?)
}

/// A policy of the configured architecture with random weights; enough
/// for timing the forward pass.
pub fn untrained_policy(learn_config: &LearnConfig, seed: u64) -> MlpPolicy {
    let dim = learn_config.features.dim();
    let sizes = [&[dim], learn_config.hidden_layers.as_slice(), &[ACTION_DIM]].concat();
    MlpPolicy::with_layers(&sizes, learn_config.features, seed)
}

/// The configured checkpoint, or a policy trained with the config seed.
pub fn load_or_train(config: &ExperimentConfig) -> Result<MlpPolicy> {
    match &config.policy {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ExperimentError::Failed(format!("reading {}: {e}", path.display())))?;
            Ok(MlpPolicy::from_checkpoint(&text)?)
        }
        None => Ok(train_policy(config, &config.learn, config.seed)?.policy),
    }
}

// ---------------------------------------------------------------- runtime

/// Timed passes of the policy over the observations of one MPCC flight.
const POLICY_PASSES: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub horizon: usize,
    pub steps: usize,
    pub mpcc_mean: f64,
    pub mpcc_max: f64,
    /// Median over passes of the mean forward time.
    pub policy_mean: f64,
    pub policy_max: f64,
    /// Per-step harness time outside the controller.
    pub overhead_mean: f64,
}

/// Median over passes of the per-pass mean forward time, and the slowest
/// single call. A forward pass takes microseconds, so one preemption can
/// dominate a plain mean.
fn time_policy(policy: &MlpPolicy, observations: &[Observation]) -> (f64, f64) {
    let mut pass_means = Vec::with_capacity(POLICY_PASSES);
    let mut slowest = 0.0f64;
    for _ in 0..POLICY_PASSES {
        let mut total = 0.0;
        for obs in observations {
            let started = Instant::now();
            let out = policy.act(obs);
            let elapsed = started.elapsed().as_secs_f64();
            std::hint::black_box(out.ok());
            total += elapsed;
            slowest = slowest.max(elapsed);
        }
        pass_means.push(total / observations.len().max(1) as f64);
    }
    pass_means.sort_by(f64::total_cmp);
    (pass_means[POLICY_PASSES / 2], slowest)
}

/// Times closed-loop MPCC solves for each horizon on an obstacle course,
/// repeating each run with the same warm-start history, and the policy
/// forward pass on the states the MPCC flights visited. Runs sequentially so the
/// clock is not shared.
pub fn exp_runtime(config: &ExperimentConfig, policy: &MlpPolicy) -> Result<(Vec<RuntimeRow>, Table)> {
    let rc = &config.runtime;
    let world = gen_course(
        rc.course_length,
        rc.spacing[0],
        rc.spacing[1],
        sub_seed(config.seed, &[1]),
        &course_options(config),
    )?;
    let start = course_start(&world);
    let flight = FlightConfig {
        max_steps: Some(rc.steps),
        ..config.flight
    };
    let mut rows = Vec::new();
    let mut observations = Vec::new();
    for &horizon in &rc.horizons {
        let controller = Controller::Mpcc {
            weights: mpcc_imitation::controllers::MpccWeights {
                horizon,
                ..config.mpcc
            },
            model: config.model,
            avoid: Some(rc.avoid_onset),
        };
        let mut runs = Vec::new();
        for _ in 0..rc.repeats {
            runs.push(run_episode(&controller, &world, &config.model, &start, &flight));
        }
        let (first, traj) = &runs[0];
        if let Some(reason) = &first.aborted {
            return Err(ExperimentError::Failed(format!("MPCC with N = {horizon}: {reason}")));
        }
        let mut vz = 0.0;
        for row in &traj.rows {
            observations.push(world.observe(&row.state, row.t, vz));
            vz = row.input.vz;
        }
        rows.push(RuntimeRow {
            horizon,
            steps: first.steps,
            mpcc_mean: mean(runs.iter().map(|(m, _)| m.controller_time_mean)),
            mpcc_max: runs.iter().map(|(m, _)| m.controller_time_max).fold(0.0, f64::max),
            policy_mean: 0.0,
            policy_max: 0.0,
            overhead_mean: mean(runs.iter().map(|(m, _)| m.overhead_mean)),
        });
    }
    // The forward cost depends on the inputs (softplus saturates) but not on
    // the horizon, so every row times the same pooled observations.
    for obs in &observations {
        std::hint::black_box(policy.act(obs).ok());
    }
    for row in &mut rows {
        (row.policy_mean, row.policy_max) = time_policy(policy, &observations);
    }
    let timing = ["mpcc_mean_s", "mpcc_max_s", "policy_mean_s", "policy_max_s", "overhead_mean_s"];
    let mut cols = vec!["horizon", "steps", "repeats"];
    cols.extend(timing);
    let mut table = Table::new("runtime", &config.hash(), config.seed, &cols, &timing);
    for r in &rows {
        table.push(vec![
            r.horizon.into(),
            r.steps.into(),
            rc.repeats.into(),
            r.mpcc_mean.into(),
            r.mpcc_max.into(),
            r.policy_mean.into(),
            r.policy_max.into(),
            r.overhead_mean.into(),
        ]);
    }
    Ok((rows, table))
}

// ---------------------------------------------------------------- density

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub spacing: [f64; 2],
    pub policy_distance: f64,
    pub apf_distance: f64,
    pub policy_completed: usize,
    pub apf_completed: usize,
}

/// Average flight distance of the policy and of APF over `rollouts`
/// courses per density.
pub fn exp_density(config: &ExperimentConfig, policy: &MlpPolicy) -> Result<(Vec<DensityRow>, Table)> {
    let dc = &config.density;
    let options = course_options(config);
    let apf = ApfParams {
        reference_speed: dc.apf_speed,
        ..config.apf
    };
    let cells: Vec<(usize, usize)> = (0..dc.densities.len())
        .flat_map(|d| (0..dc.rollouts).map(move |r| (d, r)))
        .collect();
    let flights = parallel(config.jobs, &cells, |&(d, r)| -> Result<_> {
        let seed = sub_seed(config.seed, &[2, d as u64, r as u64]);
        let world = density_course(dc.course_length, dc.densities[d], seed, &options)?;
        let start = course_start(&world);
        let (p, _) = run_episode(&Controller::Policy(policy), &world, &config.model, &start, &config.flight);
        let (a, _) = run_episode(&Controller::Apf(apf), &world, &config.model, &start, &config.flight);
        Ok((seed, world.obstacles.len(), p, a))
    })?;
    let mut table = Table::new(
        "density",
        &config.hash(),
        config.seed,
        &[
            "spacing_mean", "spacing_spread", "rollout", "course_seed", "obstacles", "controller", "distance",
            "completed", "collided", "max_z_deviation",
        ],
        &[],
    );
    let mut rows = Vec::new();
    for (d, spacing) in dc.densities.iter().enumerate() {
        let cell: Vec<&(u64, usize, FlightMetrics, FlightMetrics)> = cells
            .iter()
            .zip(&flights)
            .filter(|((cd, _), _)| *cd == d)
            .map(|(_, f)| f.as_ref().map_err(|e| ExperimentError::Failed(e.to_string())))
            .collect::<Result<_>>()?;
        for (r, (seed, count, p, a)) in cell.iter().enumerate() {
            for (name, m) in [("policy", p), ("apf", a)] {
                table.push(vec![
                    spacing[0].into(),
                    spacing[1].into(),
                    r.into(),
                    (*seed).into(),
                    (*count).into(),
                    name.into(),
                    m.distance.into(),
                    m.completed.into(),
                    m.collided.into(),
                    m.max_z_deviation.into(),
                ]);
            }
        }
        rows.push(DensityRow {
            spacing: *spacing,
            policy_distance: mean(cell.iter().map(|c| c.2.distance)),
            apf_distance: mean(cell.iter().map(|c| c.3.distance)),
            policy_completed: cell.iter().filter(|c| c.2.completed).count(),
            apf_completed: cell.iter().filter(|c| c.3.completed).count(),
        });
    }
    Ok((rows, table))
}

// ------------------------------------------------------------- robustness

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub supervisor: SupervisorKind,
    /// Capped error of each trained policy, averaged over the test starts.
    pub errors: Vec<f64>,
    pub mean_error: f64,
}

fn kind_name(kind: SupervisorKind) -> &'static str {
    match kind {
        SupervisorKind::Mpcc => "mpcc",
        SupervisorKind::Mpc => "mpc",
    }
}

fn offsets(v: &[[f64; 2]]) -> Vec<Vector2<f64>> {
    v.iter().map(|o| Vector2::new(o[0], o[1])).collect()
}

/// Ground truth for one held-out start: the contouring controller on the
/// plant model following the return path from that start.
fn ground_truth(config: &ExperimentConfig, set: &ExampleSet, index: usize) -> Result<(Vec<Point3>, usize)> {
    let path = &set.examples[index].path;
    let train_world = set.world(index, config.learn.setpoint_speed)?;
    let start = start_state(path, &train_world)?;
    let world = World::new(path.clone(), Vec::new(), config.learn.setpoint_speed)
        .map_err(|e| ExperimentError::Failed(e.to_string()))?;
    let controller = Controller::Mpcc {
        weights: config.learn.mpcc,
        model: config.model,
        avoid: None,
    };
    let (m, traj) = run_episode(&controller, &world, &config.model, &start, &config.flight);
    if let Some(reason) = m.aborted {
        return Err(ExperimentError::Failed(format!("ground truth {index}: {reason}")));
    }
    Ok((traj.positions(), m.steps))
}

/// Trains on a single return manoeuvre from the training starts with a
/// supervisor whose attitude constant is perturbed, and scores each policy
/// by its squared distance from the ground truth on the test starts.
pub fn exp_robustness(config: &ExperimentConfig) -> Result<(Vec<RobustnessRow>, Table)> {
    let rc = &config.robustness;
    let guidance = training_guidance(&config.examples)?;
    let train = ExampleSet::returns(guidance.clone(), &offsets(&rc.train_offsets))?;
    let test = ExampleSet::returns(guidance, &offsets(&rc.test_offsets))?;
    let truths = (0..test.examples.len())
        .map(|i| ground_truth(config, &test, i))
        .collect::<Result<Vec<_>>>()?;

    let kinds = [SupervisorKind::Mpcc, SupervisorKind::Mpc];
    let cells: Vec<(usize, usize, usize)> = (0..rc.alphas.len())
        .flat_map(|a| (0..kinds.len()).flat_map(move |k| (0..rc.policies).map(move |p| (a, k, p))))
        .collect();
    let scores = parallel(config.jobs, &cells, |&(a, k, p)| -> Result<(Vec<f64>, f64)> {
        let sup_model = perturb_params(&config.model, rc.alphas[a])?;
        let cfg = LearnConfig {
            supervisor: kinds[k],
            features: mpcc_imitation::policy::FeatureSet::Kinematic,
            // The same policy seeds for both supervisors and every constant.
            seed: sub_seed(config.seed, &[3, p as u64]),
            ..config.learn.clone()
        };
        let trained = match learn(&train, &config.model, &sup_model, &cfg) {
            Ok(out) => out,
            Err(_) => return Ok((vec![rc.cap; truths.len()], rc.cap)),
        };
        let errors: Vec<f64> = truths
            .iter()
            .enumerate()
            .map(|(i, (truth, steps))| {
                let world = test.world(i, config.learn.setpoint_speed)?;
                let start = start_state(&test.examples[i].path, &world)?;
                let flight = FlightConfig {
                    max_steps: Some(*steps),
                    ..config.flight
                };
                let (m, traj) = run_episode(&Controller::Policy(&trained.policy), &world, &config.model, &start, &flight);
                let flown = traj.positions();
                Ok(if m.aborted.is_some() {
                    rc.cap
                } else {
                    imitation_error(&flown, truth, rc.scale / flown.len() as f64, rc.cap)
                })
            })
            .collect::<Result<_>>()?;
        let m = mean(errors.iter().copied());
        Ok((errors, m))
    })?;

    let mut table = Table::new(
        "robustness",
        &config.hash(),
        config.seed,
        &["supervisor_alpha", "plant_alpha", "supervisor", "policy", "test_start", "error"],
        &[],
    );
    table.note(format!(
        "error = {} * mean squared distance to the ground truth (m^2), capped at {}",
        rc.scale, rc.cap
    ));
    let mut rows = Vec::new();
    for (a, alpha) in rc.alphas.iter().enumerate() {
        for (k, kind) in kinds.iter().enumerate() {
            let mut per_policy = Vec::new();
            for (cell, score) in cells.iter().zip(&scores) {
                if cell.0 != a || cell.1 != k {
                    continue;
                }
                let (errors, m) = score.as_ref().map_err(|e| ExperimentError::Failed(e.to_string()))?;
                for (i, e) in errors.iter().enumerate() {
                    table.push(vec![
                        (*alpha).into(),
                        config.model.alpha.into(),
                        kind_name(*kind).into(),
                        cell.2.into(),
                        i.into(),
                        (*e).into(),
                    ]);
                }
                per_policy.push(*m);
            }
            rows.push(RobustnessRow {
                alpha: *alpha,
                supervisor: *kind,
                mean_error: mean(per_policy.iter().copied()),
                errors: per_policy,
            });
        }
    }
    Ok((rows, table))
}

// ------------------------------------------------- supervisor comparison

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorRow {
    pub run: usize,
    pub seed: u64,
    pub supervisor: SupervisorKind,
    /// Mean over courses of the largest vertical deviation in a flight.
    pub max_z_deviation: f64,
    pub flight_length: f64,
    pub train_loss: f64,
}

/// Trains MPCC- and MPC-supervised policies on the same examples and flies
/// both over the same obstacle courses.
pub fn exp_supervisor_compare(config: &ExperimentConfig) -> Result<(Vec<SupervisorRow>, Table)> {
    let sc = &config.supervisor;
    let options = course_options(config);
    let kinds = [SupervisorKind::Mpcc, SupervisorKind::Mpc];
    let cells: Vec<(usize, usize)> = (0..sc.seeds).flat_map(|s| (0..2).map(move |k| (s, k))).collect();
    let results = parallel(config.jobs, &cells, |&(s, k)| -> Result<SupervisorRow> {
        let seed = sub_seed(config.seed, &[4, s as u64]);
        let cfg = LearnConfig {
            supervisor: kinds[k],
            ..config.learn.clone()
        };
        let out = train_policy(config, &cfg, seed)?;
        let flights = (0..sc.rollouts)
            .map(|r| {
                let world = density_course(
                    sc.course_length,
                    sc.spacing,
                    sub_seed(config.seed, &[5, s as u64, r as u64]),
                    &options,
                )?;
                let start = course_start(&world);
                Ok(run_episode(&Controller::Policy(&out.policy), &world, &config.model, &start, &config.flight).0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SupervisorRow {
            run: s,
            seed,
            supervisor: kinds[k],
            max_z_deviation: mean(flights.iter().map(|m| m.max_z_deviation)),
            flight_length: mean(flights.iter().map(|m| m.distance)),
            train_loss: out.report.final_loss(),
        })
    })?;
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(
        "supervisor",
        &config.hash(),
        config.seed,
        &["run", "train_seed", "supervisor", "max_z_deviation", "flight_length", "train_loss"],
        &[],
    );
    table.note(format!(
        "course: {} m, spacing {} +- {} m, {} rollouts",
        sc.course_length, sc.spacing[0], sc.spacing[1], sc.rollouts
    ));
    table.note("reference values: max z deviation 0.847 m (mpc) vs 0.077 m (mpcc); flight length 41.67 m vs 183.3 m");
    for r in &rows {
        table.push(vec![
            r.run.into(),
            r.seed.into(),
            kind_name(r.supervisor).into(),
            r.max_z_deviation.into(),
            r.flight_length.into(),
            r.train_loss.into(),
        ]);
    }
    Ok((rows, table))
}

// ---------------------------------------------------- exploration sweep

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExplorationMode {
    Unsafe,
    Safe { contour: f64 },
}

impl ExplorationMode {
    pub fn label(&self) -> String {
        match self {
            ExplorationMode::Unsafe => "unsafe".into(),
            ExplorationMode::Safe { contour } => format!("kc={contour}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionPhase {
    Train,
    Test,
    None,
}

impl CollisionPhase {
    pub fn name(&self) -> &'static str {
        match self {
            CollisionPhase::Train => "train",
            CollisionPhase::Test => "test",
            CollisionPhase::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationRow {
    pub run: usize,
    pub mode: ExplorationMode,
    pub train_collisions: usize,
    pub test_collisions: usize,
    pub phase: CollisionPhase,
    /// Mean RMS distance from the example paths over on-policy episodes.
    pub train_error: f64,
    /// Mean RMS distance from held-out example paths.
    pub test_error: f64,
    /// Smallest on-policy obstacle clearance (surface distance).
    pub min_clearance: f64,
}

/// Flies `policy` along every example of `set`, for as long as the
/// example path takes at the setpoint speed. Returns the mean RMS distance
/// from the paths and the number of collisions.
pub fn held_out_error(config: &ExperimentConfig, policy: &MlpPolicy, set: &ExampleSet) -> Result<(f64, usize)> {
    let speed = config.learn.setpoint_speed;
    let mut errors = Vec::new();
    let mut collisions = 0;
    for (i, e) in set.examples.iter().enumerate() {
        let world = set.world(i, speed)?;
        let start = start_state(&e.path, &world)?;
        let flight = FlightConfig {
            max_steps: Some((e.path.length() / (speed * config.model.ts)).ceil() as usize),
            ..config.flight
        };
        let (m, traj) = run_episode(&Controller::Policy(policy), &world, &config.model, &start, &flight);
        let states: Vec<_> = traj.rows.iter().map(|r| r.state).collect();
        errors.push(path_deviation(&states, &e.path).0);
        collisions += usize::from(m.collided);
    }
    Ok((mean(errors), collisions))
}

/// Learns with unsafe exploration and with each contour weight, per run,
/// and reports collisions, training deviation and held-out error.
pub fn exp_exploration_sweep(config: &ExperimentConfig) -> Result<(Vec<ExplorationRow>, Table)> {
    let ec = &config.exploration;
    let mut modes: Vec<ExplorationMode> = Vec::new();
    if ec.include_unsafe {
        modes.push(ExplorationMode::Unsafe);
    }
    modes.extend(ec.contour_weights.iter().map(|&contour| ExplorationMode::Safe { contour }));
    let cells: Vec<(usize, usize)> = (0..ec.seeds)
        .flat_map(|s| (0..modes.len()).map(move |m| (s, m)))
        .collect();
    let results = parallel(config.jobs, &cells, |&(s, m)| -> Result<ExplorationRow> {
        let seed = sub_seed(config.seed, &[6, s as u64]);
        let mut cfg = config.learn.clone();
        match modes[m] {
            ExplorationMode::Unsafe => cfg.exploration = Exploration::Unsafe,
            ExplorationMode::Safe { contour } => {
                cfg.exploration = Exploration::Safe;
                cfg.explore.contour = contour;
            }
        }
        let out = train_policy(config, &cfg, seed)?;
        let test = examples_for(&ec.test_examples, sub_seed(config.seed, &[7, s as u64]))?;
        let (test_error, test_collisions) = held_out_error(config, &out.policy, &test)?;
        let train_collisions = out.report.collisions();
        let phase = if train_collisions > 0 {
            CollisionPhase::Train
        } else if test_collisions > 0 {
            CollisionPhase::Test
        } else {
            CollisionPhase::None
        };
        Ok(ExplorationRow {
            run: s,
            mode: modes[m],
            train_collisions,
            test_collisions,
            phase,
            train_error: out.report.train_deviation(),
            test_error,
            min_clearance: out.report.on_policy_clearance(),
        })
    })?;
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(
        "exploration",
        &config.hash(),
        config.seed,
        &[
            "run", "mode", "contour_weight", "collision_phase", "train_collisions", "test_collisions",
            "train_error_m", "test_error_m", "min_clearance_m",
        ],
        &[],
    );
    for r in &rows {
        let weight = match r.mode {
            ExplorationMode::Unsafe => Value::Text(String::new()),
            ExplorationMode::Safe { contour } => contour.into(),
        };
        table.push(vec![
            r.run.into(),
            r.mode.label().into(),
            weight,
            r.phase.name().into(),
            r.train_collisions.into(),
            r.test_collisions.into(),
            r.train_error.into(),
            r.test_error.into(),
            r.min_clearance.into(),
        ]);
    }
    Ok((rows, table))
}

// --------------------------------------------------------- generalization

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizationRow {
    pub probe: String,
    pub value: f64,
    pub successes: usize,
    pub trials: usize,
    pub collisions: usize,
    pub non_finite: usize,
}

fn boxes_for(world: &World, half_width: f64, half_height: f64) -> World {
    let obstacles = world
        .obstacles
        .iter()
        .map(|o| {
            let c = o.center_xy();
            let z = world.guidance.position(0.0).z;
            Obstacle::cuboid(Vector3::new(c.x, c.y, z), Vector3::new(half_width, half_width, half_height))
                .moving(o.velocity)
        })
        .collect();
    World {
        obstacles,
        ..world.clone()
    }
}

fn scaled(world: &World, factor: f64) -> World {
    World {
        obstacles: world.obstacles.iter().map(|o| o.scaled(factor)).collect(),
        ..world.clone()
    }
}

/// One cylinder crossing the guidance at `speed`, timed to reach the
/// guidance when the setpoint does.
fn crossing_world(config: &ExperimentConfig, speed: f64) -> Result<World> {
    let options = course_options(config);
    let length = 30.0;
    let at = length / 2.0;
    let arrival = at / options.setpoint_speed;
    let world = empty_course(length, &options)?;
    let o = Obstacle::cylinder(at, -speed * arrival, options.radius).moving(Vector2::new(0.0, speed));
    Ok(World {
        obstacles: vec![o],
        ..world
    })
}

/// Probes obstacle size, obstacle shape and crossing obstacles.
pub fn exp_generalization(config: &ExperimentConfig, policy: &MlpPolicy) -> Result<(Vec<GeneralizationRow>, Table)> {
    let gc = &config.generalization;
    let options = course_options(config);
    let courses = (0..gc.rollouts)
        .map(|r| {
            density_course(
                gc.course_length,
                gc.spacing,
                sub_seed(config.seed, &[8, r as u64]),
                &options,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cells: Vec<(String, f64, World)> = Vec::new();
    for &s in &gc.radius_scales {
        for c in &courses {
            cells.push(("radius_scale".into(), s, scaled(c, s)));
        }
    }
    for c in &courses {
        cells.push(("box".into(), gc.box_half_width, boxes_for(c, gc.box_half_width, gc.box_half_height)));
    }
    for &v in &gc.crossing_speeds {
        cells.push(("crossing_speed".into(), v, crossing_world(config, v)?));
    }
    let flights = parallel(config.jobs, &cells, |(_, _, world)| {
        run_episode(&Controller::Policy(policy), world, &config.model, &course_start(world), &config.flight).0
    })?;
    let mut table = Table::new(
        "generalization",
        &config.hash(),
        config.seed,
        &["probe", "value", "trial", "success", "collided", "non_finite_output", "distance"],
        &[],
    );
    let mut rows: Vec<GeneralizationRow> = Vec::new();
    for ((probe, value, _), m) in cells.iter().zip(&flights) {
        let trial = match rows.last_mut() {
            Some(r) if r.probe == *probe && r.value == *value => r,
            _ => {
                rows.push(GeneralizationRow {
                    probe: probe.clone(),
                    value: *value,
                    successes: 0,
                    trials: 0,
                    collisions: 0,
                    non_finite: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        let success = m.completed && !m.collided;
        table.push(vec![
            probe.as_str().into(),
            (*value).into(),
            trial.trials.into(),
            success.into(),
            m.collided.into(),
            m.non_finite_output.into(),
            m.distance.into(),
        ]);
        trial.trials += 1;
        trial.successes += usize::from(success);
        trial.collisions += usize::from(m.collided);
        trial.non_finite += usize::from(m.non_finite_output);
    }
    Ok((rows, table))
}
