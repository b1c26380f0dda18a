//! Bistatic mmWave radio SLAM: random-finite-set map filters (GM-PHD and
//! PMBM) inside a Rao-Blackwellized particle filter, a belief-propagation
//! SLAM variant, and the simulation and scoring tools around them.

pub mod model;
pub mod motion;
pub mod rng;
pub mod simulator;
pub mod assignment;
pub mod gaussian;
pub mod birth;
pub mod gm_phd;
pub mod pmbm;
pub mod metrics;
pub mod rbpf;
pub mod bp_slam;
pub mod config;
pub mod experiment;
