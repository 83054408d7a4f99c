//! Experiment harness for the imitation-learned quadrotor policy: obstacle
//! courses, closed-loop flights, and the comparative studies.

pub mod config;
pub mod episode;
pub mod experiments;
pub mod report;
pub mod scenario;
