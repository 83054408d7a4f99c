//! Experiment configuration, read from TOML. Every field has a default, so
//! a file only needs the keys it changes.

use crate::episode::FlightConfig;
use mpcc_imitation::controllers::{ApfParams, MpccWeights};
use mpcc_imitation::dynamics::ModelParams;
use mpcc_imitation::imitation::{ExampleConfig, LearnConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub horizons: Vec<usize>,
    pub repeats: usize,
    /// Closed-loop steps timed per run.
    pub steps: usize,
    pub course_length: f64,
    pub spacing: [f64; 2],
    /// Avoidance onset from the obstacle surface.
    pub avoid_onset: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            horizons: vec![5, 10, 20, 30],
            repeats: 3,
            steps: 60,
            course_length: 20.0,
            spacing: [3.0, 1.5],
            avoid_onset: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Spacing mean and spread; `[0, 0]` is the empty course.
    pub densities: Vec<[f64; 2]>,
    pub course_length: f64,
    pub rollouts: usize,
    pub apf_speed: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            densities: vec![[0.0, 0.0], [5.0, 2.5], [4.0, 2.0], [3.0, 1.5], [2.5, 1.25], [2.0, 1.0]],
            course_length: 200.0,
            rollouts: 3,
            apf_speed: 1.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Supervisor attitude constants; the plant keeps `model.alpha`.
    pub alphas: Vec<f64>,
    /// Policies trained per supervisor and constant.
    pub policies: usize,
    /// Start offsets (lateral, vertical) of the training examples. The
    /// test starts lie between them.
    pub train_offsets: Vec<[f64; 2]>,
    pub test_offsets: Vec<[f64; 2]>,
    /// Errors are capped here; failed trainings score the cap.
    pub cap: f64,
    /// Multiplies the mean squared distance so that the desk-scale
    /// manoeuvre lands on the same error scale as the original.
    pub scale: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.70, 0.75, 0.80, 0.85, 0.90, 0.95],
            policies: 3,
            train_offsets: vec![[0.8, 0.3], [-0.8, -0.3], [1.8, -0.3], [-1.8, 0.3]],
            test_offsets: vec![[1.0, 0.1], [-1.0, -0.1], [1.3, 0.0], [-1.3, 0.0], [1.6, -0.2], [-1.6, 0.2]],
            cap: 50.0,
            scale: 160.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    pub seeds: usize,
    pub course_length: f64,
    pub spacing: [f64; 2],
    pub rollouts: usize,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            course_length: 100.0,
            spacing: [3.0, 1.5],
            rollouts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub contour_weights: Vec<f64>,
    pub include_unsafe: bool,
    pub seeds: usize,
    /// Held-out example paths flown by each trained policy.
    pub test_examples: ExampleConfig,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            contour_weights: vec![0.1, 10.0, 25.0],
            include_unsafe: true,
            seeds: 3,
            test_examples: ExampleConfig {
                returns: 4,
                avoids: 4,
                ..ExampleConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralizationConfig {
    pub radius_scales: Vec<f64>,
    pub crossing_speeds: Vec<f64>,
    pub course_length: f64,
    pub spacing: [f64; 2],
    pub rollouts: usize,
    /// Box half-width across the path, matched to the cylinder radius.
    pub box_half_width: f64,
    pub box_half_height: f64,
}

impl Default for GeneralizationConfig {
    fn default() -> Self {
        Self {
            radius_scales: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            crossing_speeds: vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.2, 1.6, 2.0],
            course_length: 60.0,
            spacing: [3.0, 1.5],
            rollouts: 3,
            box_half_width: 0.2,
            box_half_height: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Scenario file flown by `rollout`.
    pub scenario: Option<PathBuf>,
    /// Trained policy checkpoint. Experiments that need one train it
    /// from `learn` and `examples` when absent.
    pub policy: Option<PathBuf>,
    /// Plant parameters; supervisors use them too unless an experiment
    /// perturbs them.
    pub model: ModelParams,
    pub learn: LearnConfig,
    pub examples: ExampleConfig,
    pub flight: FlightConfig,
    pub apf: ApfParams,
    /// Weights of the MPCC flown as a controller.
    pub mpcc: MpccWeights,
    pub runtime: RuntimeConfig,
    pub density: DensityConfig,
    pub robustness: RobustnessConfig,
    pub supervisor: SupervisorConfig,
    pub exploration: ExplorationConfig,
    pub generalization: GeneralizationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("results"),
            jobs: 0,
            scenario: None,
            policy: None,
            model: ModelParams::default(),
            learn: LearnConfig::default(),
            examples: ExampleConfig::default(),
            flight: FlightConfig::default(),
            apf: ApfParams::default(),
            mpcc: MpccWeights::default(),
            runtime: RuntimeConfig::default(),
            density: DensityConfig::default(),
            robustness: RobustnessConfig::default(),
            supervisor: SupervisorConfig::default(),
            exploration: ExplorationConfig::default(),
            generalization: GeneralizationConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

fn non_empty<T>(name: &str, v: &[T]) -> Result<(), ConfigError> {
    if v.is_empty() {
        Err(ConfigError::Invalid(format!("{name} must not be empty")))
    } else {
        Ok(())
    }
}

fn at_least_one(name: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(ConfigError::Invalid(format!("{name} must be at least 1")))
    } else {
        Ok(())
    }
}

fn spacing(name: &str, s: &[f64; 2]) -> Result<(), ConfigError> {
    if s[1] >= 0.0 && s[0] > s[1] {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} {s:?} needs mean > spread >= 0")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, excluding where results go and
    /// how many threads compute them.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: PathBuf::new(),
            jobs: 0,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mpcc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.learn.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let r = &self.runtime;
        non_empty("runtime.horizons", &r.horizons)?;
        if r.horizons.contains(&0) {
            return Err(ConfigError::Invalid("runtime.horizons must be positive".into()));
        }
        at_least_one("runtime.repeats", r.repeats)?;
        at_least_one("runtime.steps", r.steps)?;
        positive("runtime.course_length", r.course_length)?;
        spacing("runtime.spacing", &r.spacing)?;

        let d = &self.density;
        non_empty("density.densities", &d.densities)?;
        for s in &d.densities {
            if *s != [0.0, 0.0] {
                spacing("density.densities", s)?;
            }
        }
        positive("density.course_length", d.course_length)?;
        positive("density.apf_speed", d.apf_speed)?;
        at_least_one("density.rollouts", d.rollouts)?;

        let b = &self.robustness;
        non_empty("robustness.alphas", &b.alphas)?;
        if b.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(ConfigError::Invalid("robustness.alphas must lie in (0, 1)".into()));
        }
        at_least_one("robustness.policies", b.policies)?;
        non_empty("robustness.train_offsets", &b.train_offsets)?;
        non_empty("robustness.test_offsets", &b.test_offsets)?;
        positive("robustness.cap", b.cap)?;
        positive("robustness.scale", b.scale)?;

        let s = &self.supervisor;
        at_least_one("supervisor.seeds", s.seeds)?;
        at_least_one("supervisor.rollouts", s.rollouts)?;
        positive("supervisor.course_length", s.course_length)?;
        spacing("supervisor.spacing", &s.spacing)?;

        let e = &self.exploration;
        non_empty("exploration.contour_weights", &e.contour_weights)?;
        at_least_one("exploration.seeds", e.seeds)?;

        let g = &self.generalization;
        non_empty("generalization.radius_scales", &g.radius_scales)?;
        non_empty("generalization.crossing_speeds", &g.crossing_speeds)?;
        positive("generalization.course_length", g.course_length)?;
        spacing("generalization.spacing", &g.spacing)?;
        at_least_one("generalization.rollouts", g.rollouts)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = ExperimentConfig::from_toml("seed = 9\n[density]\nrollouts = 5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.density.rollouts, 5);
        assert_eq!(c.runtime, RuntimeConfig::default());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let moved = ExperimentConfig {
            out: "elsewhere".into(),
            jobs: 4,
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
        let reseeded = ExperimentConfig { seed: 1, ..c.clone() };
        assert_ne!(reseeded.hash(), c.hash());
    }

    #[test]
    fn invalid_lists_are_rejected() {
        assert!(ExperimentConfig::from_toml("[runtime]\nhorizons = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[density]\nrollouts = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[supervisor]\ncourse_length = -1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[density]\ndensities = [[1.0, 2.0]]\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
    }
}
