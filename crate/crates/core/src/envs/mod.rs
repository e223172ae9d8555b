//! Simulated sparse-reward tasks, scripted experts and the intervention gate.

mod gate;
mod gridfold;
pub mod pointmass;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gate::{gate_decide, recovery_level, Gate, GateConfig, GateDecision, GatePhase};
pub use gridfold::{GridFold, GridState, GRID_ACTIONS, GRID_SIZE};
pub use pointmass::{PointMass, PointMassLayout, PointMassState};

/// Width of the shared observation vector. Every task pads its features to this.
pub const OBS_DIM: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("unknown initial-condition set {0:?}")]
    UnknownInitSet(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("step called on a terminal state")]
    StepAfterTerminal,
    #[error("action does not fit the task's action space: {0}")]
    BadAction(String),
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    GridFold,
    ReachChunk,
    CollarFlip,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::GridFold,
        TaskKind::ReachChunk,
        TaskKind::CollarFlip,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::GridFold => "gridfold",
            TaskKind::ReachChunk => "reachchunk",
            TaskKind::CollarFlip => "collarflip",
        }
    }

    pub fn index(self) -> usize {
        match self {
            TaskKind::GridFold => 0,
            TaskKind::ReachChunk => 1,
            TaskKind::CollarFlip => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TaskKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize, horizon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: TaskKind,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    /// Maximum episode length in environment steps.
    pub max_steps: usize,
    /// Simulated seconds per environment step.
    pub step_duration: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(EnvError::InvalidSpec("max_steps must be >= 1".into()));
        }
        if let ActionSpace::Continuous { horizon, dim } = self.action_space {
            if horizon < 1 || dim < 1 {
                return Err(EnvError::InvalidSpec(
                    "chunk horizon and dim must be >= 1".into(),
                ));
            }
        }
        if !(self.step_duration > 0.0) {
            return Err(EnvError::InvalidSpec("step_duration must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSet {
    Standard,
    Adversarial,
}

impl FromStr for InitSet {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(InitSet::Standard),
            "adversarial" => Ok(InitSet::Adversarial),
            other => Err(EnvError::UnknownInitSet(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionChunk {
    Discrete(usize),
    /// Row-major `horizon × dim` commands, each in [−1, 1].
    Continuous {
        horizon: usize,
        dim: usize,
        commands: Vec<f64>,
    },
}

impl ActionChunk {
    pub fn continuous(horizon: usize, dim: usize, mut commands: Vec<f64>) -> Self {
        assert_eq!(commands.len(), horizon * dim);
        commands.iter_mut().for_each(|c| *c = c.clamp(-1.0, 1.0));
        ActionChunk::Continuous {
            horizon,
            dim,
            commands,
        }
    }

    /// A chunk repeating the same command `horizon` times.
    pub fn constant(horizon: usize, command: &[f64]) -> Self {
        let commands = (0..horizon).flat_map(|_| command.iter().copied()).collect();
        Self::continuous(horizon, command.len(), commands)
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            ActionChunk::Discrete(a) => Some(*a),
            _ => None,
        }
    }

    pub fn commands(&self) -> Option<&[f64]> {
        match self {
            ActionChunk::Continuous { commands, .. } => Some(commands),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    None,
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub terminal: bool,
    pub outcome: Outcome,
}

/// Environment instance: one of the simulated tasks with its current state.
#[derive(Debug, Clone)]
pub enum Env {
    GridFold(GridFold),
    PointMass(PointMass),
}

impl Env {
    pub fn new(task: TaskKind) -> Self {
        match task {
            TaskKind::GridFold => Env::GridFold(GridFold::new()),
            TaskKind::ReachChunk => Env::PointMass(PointMass::new(PointMassLayout::Corridor)),
            TaskKind::CollarFlip => Env::PointMass(PointMass::new(PointMassLayout::Collar)),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            Env::GridFold(e) => e.spec(),
            Env::PointMass(e) => e.spec(),
        }
    }

    pub fn task(&self) -> TaskKind {
        self.spec().task
    }

    pub fn reset(&mut self, seed: u64, init: InitSet) -> Observation {
        match self {
            Env::GridFold(e) => e.reset(seed, init),
            Env::PointMass(e) => e.reset(seed, init),
        }
    }

    pub fn reset_named(&mut self, seed: u64, init: &str) -> Result<Observation> {
        Ok(self.reset(seed, init.parse()?))
    }

    pub fn step(&mut self, chunk: &ActionChunk) -> Result<StepResult> {
        match self {
            Env::GridFold(e) => e.step(chunk),
            Env::PointMass(e) => e.step(chunk),
        }
    }

    pub fn observe(&self) -> Observation {
        match self {
            Env::GridFold(e) => e.observe(),
            Env::PointMass(e) => e.observe(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        match self {
            Env::GridFold(e) => e.state().outcome != Outcome::None,
            Env::PointMass(e) => e.state().outcome != Outcome::None,
        }
    }

    pub fn outcome(&self) -> Outcome {
        match self {
            Env::GridFold(e) => e.state().outcome,
            Env::PointMass(e) => e.state().outcome,
        }
    }

    pub fn t(&self) -> usize {
        match self {
            Env::GridFold(e) => e.state().t,
            Env::PointMass(e) => e.state().t,
        }
    }

    /// The correct expert. With `noise > 0` the decision is replaced by a
    /// uniformly random one with probability `noise`.
    pub fn expert_action<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> ActionChunk {
        match self {
            Env::GridFold(e) => e.expert_action(noise, rng),
            Env::PointMass(e) => e.expert_action(noise, rng, false),
        }
    }

    /// The demonstrator used to build demo datasets. Identical to the expert
    /// except on CollarFlip, where it follows the episode's scripted mode choice.
    pub fn demo_action<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> ActionChunk {
        match self {
            Env::GridFold(e) => e.expert_action(noise, rng),
            Env::PointMass(e) => e.expert_action(noise, rng, true),
        }
    }

    /// Distance from the agent to the nearest failure region, in task units.
    pub fn failure_distance(&self) -> f64 {
        match self {
            Env::GridFold(e) => e.failure_distance(),
            Env::PointMass(e) => e.failure_distance(),
        }
    }

    /// Highest task stage reached so far (0-based; GridFold has 3 stages).
    pub fn stage_reached(&self) -> usize {
        match self {
            Env::GridFold(e) => e.state().max_stage,
            Env::PointMass(e) => usize::from(e.state().outcome == Outcome::Success),
        }
    }

    pub fn as_point_mass(&self) -> Option<&PointMass> {
        match self {
            Env::PointMass(e) => Some(e),
            _ => None,
        }
    }
}

pub fn spec_for(task: TaskKind) -> EnvSpec {
    Env::new(task).spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_init_set_is_rejected() {
        let mut env = Env::new(TaskKind::ReachChunk);
        assert_eq!(
            env.reset_named(0, "sideways"),
            Err(EnvError::UnknownInitSet("sideways".into()))
        );
        assert!(env.reset_named(0, "adversarial").is_ok());
    }

    #[test]
    fn specs_satisfy_invariants() {
        for task in TaskKind::ALL {
            let spec = spec_for(task);
            spec.validate().unwrap();
            assert_eq!(spec.obs_dim, OBS_DIM);
        }
        let bad = EnvSpec {
            task: TaskKind::ReachChunk,
            obs_dim: 3,
            action_space: ActionSpace::Continuous { dim: 2, horizon: 0 },
            max_steps: 10,
            step_duration: 0.1,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn task_ids_roundtrip() {
        for task in TaskKind::ALL {
            assert_eq!(task.id().parse::<TaskKind>().unwrap(), task);
        }
        assert!("espresso".parse::<TaskKind>().is_err());
    }
}
