#![allow(dead_code)]

use mpcc_experiments::config::ExperimentConfig;
use mpcc_imitation::imitation::ExampleConfig;

/// Every experiment shrunk to a few seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.examples = ExampleConfig {
        guidance_length: 15.0,
        returns: 2,
        avoids: 1,
        obstacle_distance: 6.0,
        ..ExampleConfig::default()
    };
    c.learn.hidden_layers = vec![8];
    c.learn.train.epochs = 20;
    c.learn.retrain_epochs = 5;
    c.learn.max_iterations = Some(1);
    c.learn.augment.copies = 1;
    c.runtime.horizons = vec![5, 10];
    c.runtime.repeats = 1;
    c.runtime.steps = 10;
    c.density.densities = vec![[3.0, 1.5], [2.0, 1.0]];
    c.density.course_length = 20.0;
    c.density.rollouts = 1;
    c.robustness.alphas = vec![0.85];
    c.robustness.policies = 1;
    c.robustness.test_offsets = vec![[1.0, 0.1], [-1.0, -0.1], [1.3, 0.0]];
    c.supervisor.seeds = 1;
    c.supervisor.course_length = 20.0;
    c.supervisor.rollouts = 1;
    c.exploration.contour_weights = vec![10.0];
    c.exploration.include_unsafe = false;
    c.exploration.seeds = 1;
    c.exploration.test_examples = c.examples;
    c.generalization.radius_scales = vec![1.0, 2.0];
    c.generalization.crossing_speeds = vec![0.7];
    c.generalization.course_length = 20.0;
    c.generalization.rollouts = 1;
    c
}
