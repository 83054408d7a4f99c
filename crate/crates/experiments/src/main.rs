use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mpcc_experiments::config::ExperimentConfig;
use mpcc_experiments::episode::{course_start, run_episode, Controller};
use mpcc_experiments::experiments::{
    exp_density, exp_exploration_sweep, exp_generalization, exp_robustness, exp_runtime, exp_supervisor_compare,
    load_or_train, train_policy, untrained_policy,
};
use mpcc_experiments::report::Table;
use mpcc_experiments::scenario::{gen_course, CourseOptions, Scenario};
use mpcc_imitation::policy::MlpPolicy;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Imitation learning of a contouring controller for quadrotor path
/// following: training, rollouts and the comparative experiments.
#[derive(Parser)]
#[command(name = "mpcc-il", version)]
struct Cli {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Flyer {
    Policy,
    Mpcc,
    Apf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write its checkpoint, learning report and dataset.
    Train,
    /// Fly one controller through a scenario file.
    Rollout {
        /// Scenario file; falls back to the config's scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "policy")]
        controller: Flyer,
    },
    /// Solve times of the contouring controller against the policy.
    BenchRuntime,
    /// Flight distance of the policy and APF over obstacle densities.
    ExpDensity,
    /// Imitation error under supervisor model mismatch.
    ExpRobustness,
    /// Contouring against tracking supervision on an obstacle course.
    ExpSupervisor,
    /// Unsafe exploration against contour weights.
    ExpExploration,
    /// Obstacle size, shape and crossing speed probes.
    ExpGeneralization,
    /// Write a random obstacle course as a scenario file.
    GenCourse {
        #[arg(long, default_value_t = 200.0)]
        length: f64,
        #[arg(long, default_value_t = 3.0)]
        spacing_mean: f64,
        #[arg(long, default_value_t = 1.5)]
        spacing_spread: f64,
        /// Scenario path; defaults to `course.txt` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn save(table: &Table, out: &Path) -> Result<()> {
    let path = table.save(out).with_context(|| format!("writing {} table", table.name))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn policy_for(config: &ExperimentConfig) -> Result<MlpPolicy> {
    if config.policy.is_none() {
        eprintln!("no policy checkpoint configured, training one");
    }
    Ok(load_or_train(config)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.learn.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    config.validate()?;
    let out = config.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Train => {
            let trained = train_policy(&config, &config.learn, config.seed)?;
            fs::write(out.join("policy.txt"), trained.policy.to_checkpoint())?;
            trained
                .report
                .write_csv(BufWriter::new(fs::File::create(out.join("learn_report.csv"))?))?;
            trained
                .dataset
                .write_csv(BufWriter::new(fs::File::create(out.join("dataset.csv"))?))?;
            trained
                .dataset
                .write_binary(BufWriter::new(fs::File::create(out.join("dataset.bin"))?))?;
            let r = &trained.report;
            eprintln!(
                "trained on {} samples: loss {:.4}, {} training collisions, train deviation {:.3} m",
                trained.dataset.len(),
                r.final_loss(),
                r.collisions(),
                r.train_deviation()
            );
        }
        Command::Rollout { scenario, controller } => {
            let Some(path) = scenario.or(config.scenario.clone()) else {
                bail!("rollout needs --scenario or a scenario in the config");
            };
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let world = Scenario::parse(&text)?.world()?;
            let policy;
            let flyer = match controller {
                Flyer::Policy => {
                    policy = policy_for(&config)?;
                    Controller::Policy(&policy)
                }
                Flyer::Mpcc => Controller::Mpcc {
                    weights: config.mpcc,
                    model: config.model,
                    avoid: Some(0.6),
                },
                Flyer::Apf => Controller::Apf(config.apf),
            };
            let (m, traj) = run_episode(&flyer, &world, &config.model, &course_start(&world), &config.flight);
            traj.write_csv(BufWriter::new(fs::File::create(out.join("trajectory.csv"))?))?;
            println!(
                "{}: distance {:.2} m, completed {}, collided {}, max z deviation {:.3} m, mean speed {:.2} m/s",
                flyer.name(),
                m.distance,
                m.completed,
                m.collided,
                m.max_z_deviation,
                m.mean_speed
            );
            if let Some(reason) = m.aborted {
                println!("aborted: {reason}");
            }
        }
        Command::BenchRuntime => {
            let policy = match &config.policy {
                Some(_) => policy_for(&config)?,
                // Forward time does not depend on the weights.
                None => untrained_policy(&config.learn, config.seed),
            };
            let (rows, table) = exp_runtime(&config, &policy)?;
            for r in rows {
                println!(
                    "N = {:2}: mpcc mean {:.2e} s, max {:.2e} s; policy mean {:.2e} s",
                    r.horizon, r.mpcc_mean, r.mpcc_max, r.policy_mean
                );
            }
            save(&table, &out)?;
        }
        Command::ExpDensity => {
            let policy = policy_for(&config)?;
            let (rows, table) = exp_density(&config, &policy)?;
            for r in rows {
                println!(
                    "{} +- {} m: policy {:.1} m, apf {:.1} m",
                    r.spacing[0], r.spacing[1], r.policy_distance, r.apf_distance
                );
            }
            save(&table, &out)?;
        }
        Command::ExpRobustness => {
            let (rows, table) = exp_robustness(&config)?;
            for r in rows {
                println!("alpha {:.2} {:?}: error {:.2}", r.alpha, r.supervisor, r.mean_error);
            }
            save(&table, &out)?;
        }
        Command::ExpSupervisor => {
            let (rows, table) = exp_supervisor_compare(&config)?;
            for r in rows {
                println!(
                    "run {} {:?}: max z deviation {:.3} m, flight length {:.1} m",
                    r.run, r.supervisor, r.max_z_deviation, r.flight_length
                );
            }
            save(&table, &out)?;
        }
        Command::ExpExploration => {
            let (rows, table) = exp_exploration_sweep(&config)?;
            for r in rows {
                println!(
                    "run {} {}: collisions {}, train {:.3} m, test {:.3} m",
                    r.run,
                    r.mode.label(),
                    r.phase.name(),
                    r.train_error,
                    r.test_error
                );
            }
            save(&table, &out)?;
        }
        Command::ExpGeneralization => {
            let policy = policy_for(&config)?;
            let (rows, table) = exp_generalization(&config, &policy)?;
            for r in rows {
                println!(
                    "{} {}: {}/{} succeeded, {} non-finite",
                    r.probe, r.value, r.successes, r.trials, r.non_finite
                );
            }
            save(&table, &out)?;
        }
        Command::GenCourse {
            length,
            spacing_mean,
            spacing_spread,
            output,
        } => {
            let options = CourseOptions {
                height: config.examples.height,
                radius: config.examples.obstacle_radius,
                setpoint_speed: config.learn.setpoint_speed,
                ..CourseOptions::default()
            };
            let world = gen_course(length, spacing_mean, spacing_spread, config.seed, &options)?;
            let path = output.unwrap_or_else(|| out.join("course.txt"));
            fs::write(&path, Scenario::from_world(&world, Some(config.seed)).to_text())?;
            println!("{} obstacles written to {}", world.obstacles.len(), path.display());
        }
    }
    Ok(())
}
