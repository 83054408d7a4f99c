mod common;

use common::tiny_config;
use mpcc_experiments::config::ExperimentConfig;
use mpcc_experiments::episode::{course_start, run_episode, Controller, FlightConfig};
use mpcc_experiments::experiments::{
    exp_density, exp_generalization, exp_runtime, exp_supervisor_compare, sub_seed, train_policy, untrained_policy,
};
use mpcc_experiments::report::read_reproducible;
use mpcc_experiments::scenario::{gen_course, CourseOptions, Scenario};
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::Command;

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mpcc-il-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn runtime_table_keeps_timing_apart() {
    let config = tiny_config();
    let policy = untrained_policy(&config.learn, 0);
    let (rows, table) = exp_runtime(&config, &policy).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r.steps, 10);
        assert!(r.mpcc_mean > 0.0 && r.mpcc_max >= r.mpcc_mean);
        assert!(r.policy_mean > 0.0);
    }
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert!(text.contains(&format!("# config_sha256: {}", config.hash())));
    let (header, body) = read_reproducible(BufReader::new(csv.as_slice())).unwrap();
    assert_eq!(header, ["horizon", "steps", "repeats"]);
    assert_eq!(body, table.reproducible_rows());
}

#[test]
fn density_and_generalization_repeat_exactly() {
    let config = tiny_config();
    let policy = untrained_policy(&config.learn, 3);
    let (rows, a) = exp_density(&config, &policy).unwrap();
    let (_, b) = exp_density(&config, &policy).unwrap();
    assert_eq!(a.reproducible_rows(), b.reproducible_rows());
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r.apf_distance > 0.0 && r.policy_distance >= 0.0);
    }
    let (rows, a) = exp_generalization(&config, &policy).unwrap();
    let (_, b) = exp_generalization(&config, &policy).unwrap();
    assert_eq!(a.reproducible_rows(), b.reproducible_rows());
    // Two radius scales, one box setting, one crossing speed.
    assert_eq!(rows.len(), 4);
}

#[test]
fn different_seeds_give_different_courses() {
    let options = CourseOptions::default();
    let a = gen_course(30.0, 3.0, 1.5, sub_seed(1, &[2]), &options).unwrap();
    let b = gen_course(30.0, 3.0, 1.5, sub_seed(2, &[2]), &options).unwrap();
    let c = gen_course(30.0, 3.0, 1.5, sub_seed(1, &[2]), &options).unwrap();
    assert_ne!(a.obstacles, b.obstacles);
    assert_eq!(a.obstacles, c.obstacles);
}

#[test]
fn trained_policy_flies_a_free_course() {
    let mut config = tiny_config();
    config.learn.max_iterations = None;
    let out = train_policy(&config, &config.learn, 0).unwrap();
    assert!(out.report.final_loss().is_finite());
    assert_eq!(out.report.collisions(), 0);
    let world = Scenario::parse("setpoint_speed 1.3\nguidance 0 0 1.5\nguidance 15 0 1.5\n")
        .unwrap()
        .world()
        .unwrap();
    let flight = FlightConfig::default();
    let (m, traj) = run_episode(&Controller::Policy(&out.policy), &world, &config.model, &course_start(&world), &flight);
    assert!(m.aborted.is_none());
    assert!(!traj.rows.is_empty());
    assert!(m.distance > 0.0);
}

#[test]
fn supervisor_comparison_reports_both_kinds() {
    let config = tiny_config();
    let (rows, table) = exp_supervisor_compare(&config).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].supervisor, rows[1].supervisor);
    assert!(table.notes.iter().any(|n| n.contains("0.077")));
}

#[test]
fn config_files_round_trip_through_the_cli() {
    let dir = scratch_dir("cli");
    let config = tiny_config();
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).unwrap();
    let bin = env!("CARGO_BIN_EXE_mpcc-il");

    let course = dir.join("course.txt");
    let status = Command::new(bin)
        .args(["--config", path.to_str().unwrap(), "--seed", "4", "gen-course", "--length", "20"])
        .arg("--output")
        .arg(&course)
        .status()
        .unwrap();
    assert!(status.success());
    let scenario = Scenario::parse(&fs::read_to_string(&course).unwrap()).unwrap();
    assert!(!scenario.world().unwrap().obstacles.is_empty());

    let out = Command::new(bin)
        .args(["--config", path.to_str().unwrap(), "--out"])
        .arg(&dir)
        .args(["rollout", "--controller", "apf", "--scenario"])
        .arg(&course)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("apf: distance"));
    let trajectory = fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert!(trajectory.starts_with("t,x,y,z"));

    let bad = dir.join("bad.toml");
    fs::write(&bad, "[runtime]\nhorizons = []\n").unwrap();
    let out = Command::new(bin).args(["--config", bad.to_str().unwrap(), "bench-runtime"]).output().unwrap();
    assert!(!out.status.success());
    let typo = dir.join("typo.toml");
    fs::write(&typo, "[runtime]\nhorizon = [5]\n").unwrap();
    let out = Command::new(bin).args(["--config", typo.to_str().unwrap(), "bench-runtime"]).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(ExperimentConfig::load(&path).unwrap(), config);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn shipped_config_matches_the_defaults() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}
