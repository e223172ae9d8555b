//! Iterated offline reinforcement learning with advantage-conditioned
//! policies, distributional critics, flow-matching action heads and
//! human-gated corrections, exercised on small simulated tasks.

pub mod approx;
pub mod baselines;
pub mod envs;
pub mod orchestrator;
pub mod policy;
pub mod returns;
pub mod ui;
pub mod value;
