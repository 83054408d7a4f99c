//! Quadrotor path following with a contouring MPC supervisor, and imitation
//! learning of a feed-forward policy that maps sensor observations to
//! attitude and climb-rate commands.

pub mod controllers;
pub mod dynamics;
pub mod geometry;
pub mod imitation;
pub mod policy;
pub mod world;
