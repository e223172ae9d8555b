use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OrchestratorError, Result};
use crate::baselines::BaselineConfig;
use crate::envs::{GateConfig, InitSet, TaskKind};
use crate::policy::{PolicyArch, PolicyTrainConfig, DEFAULT_FLOW_STEPS};
use crate::value::{AdvantageMode, ValueConfig};

/// Where intervention episodes get their corrections from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionSource {
    None,
    ScriptedGate,
    Ui,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSettings {
    pub task: TaskKind,
    pub demo_episodes: usize,
    /// Probability that a demonstrator decision is replaced by a random one.
    pub demo_noise: f64,
    /// Initial conditions for demos, collection and evaluation.
    pub init: InitSet,
    pub gate: GateConfig,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self::for_task(TaskKind::ReachChunk)
    }
}

impl TaskSettings {
    pub fn for_task(task: TaskKind) -> Self {
        let (demo_noise, init, gate) = match task {
            TaskKind::GridFold => (
                0.3,
                InitSet::Standard,
                // Failure distance is measured in grid cells here.
                GateConfig {
                    failure_margin: 1.0,
                    ..GateConfig::default()
                },
            ),
            // The corridor is narrower than the default margin.
            TaskKind::ReachChunk => (
                0.3,
                InitSet::Standard,
                GateConfig {
                    failure_margin: 0.02,
                    ..GateConfig::default()
                },
            ),
            TaskKind::CollarFlip => (0.0, InitSet::Adversarial, GateConfig::default()),
        };
        Self {
            task,
            demo_episodes: 200,
            demo_noise,
            init,
            gate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    pub iterations: usize,
    pub autonomous_episodes: usize,
    pub intervention_episodes: usize,
    pub intervention_source: InterventionSource,
    /// Positive fraction targeted when calibrating pretraining thresholds.
    pub pretrain_positive_fraction: f64,
    /// Positive fraction targeted after each iteration's critic update.
    pub positive_fraction: f64,
    pub advantage_mode: AdvantageMode,
    /// Keep failed autonomous episodes in policy training.
    pub include_failed_autonomous: bool,
    pub eval_episodes: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            autonomous_episodes: 300,
            intervention_episodes: 100,
            intervention_source: InterventionSource::ScriptedGate,
            pretrain_positive_fraction: 0.3,
            positive_fraction: 0.4,
            advantage_mode: AdvantageMode::NStep(10),
            include_failed_autonomous: true,
            eval_episodes: 200,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(OrchestratorError::Config("iterations must be >= 1".into()));
        }
        for (name, f) in [
            (
                "pretrain_positive_fraction",
                self.pretrain_positive_fraction,
            ),
            ("positive_fraction", self.positive_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(OrchestratorError::Config(format!(
                    "{name} must lie in (0, 1)"
                )));
            }
        }
        if let AdvantageMode::NStep(0) = self.advantage_mode {
            return Err(OrchestratorError::Config(
                "n-step lookahead must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub flow_steps: usize,
    /// Guidance weight; 1 samples the positive-conditioned policy directly.
    pub beta: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            flow_steps: DEFAULT_FLOW_STEPS,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UiConfig {
    pub address: String,
    pub accept_timeout_ms: u64,
    /// How long a policy-controlled step waits for a takeover.
    pub step_period_ms: u64,
    /// How long a human-controlled step waits for a command.
    pub human_timeout_ms: u64,
    pub label_timeout_ms: u64,
}

impl Default for UiConfig {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:8765".into(),
            accept_timeout_ms: 30_000,
            step_period_ms: 100,
            human_timeout_ms: 5_000,
            label_timeout_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: Vec<TaskSettings>,
    pub value: ValueConfig,
    pub policy_arch: PolicyArch,
    pub pretrain: PolicyTrainConfig,
    pub sft: PolicyTrainConfig,
    pub finetune: PolicyTrainConfig,
    pub iteration: IterationConfig,
    pub baselines: BaselineConfig,
    /// Sampling during data collection.
    pub sampling: SamplingConfig,
    /// Sampling when evaluating conditioned policies.
    pub evaluation: SamplingConfig,
    pub ui: UiConfig,
    /// Concurrent environment workers for collection and evaluation.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: TaskKind::ALL
                .iter()
                .map(|&t| TaskSettings::for_task(t))
                .collect(),
            value: ValueConfig::default(),
            policy_arch: PolicyArch::default(),
            pretrain: PolicyTrainConfig::default(),
            sft: PolicyTrainConfig::default(),
            finetune: PolicyTrainConfig::default(),
            iteration: IterationConfig::default(),
            baselines: BaselineConfig::default(),
            sampling: SamplingConfig::default(),
            evaluation: SamplingConfig::default(),
            ui: UiConfig::default(),
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.iteration.validate()?;
        if self.sampling.beta < 1.0 || self.evaluation.beta < 1.0 {
            return Err(OrchestratorError::Config("beta must be >= 1".into()));
        }
        let mut seen: Vec<TaskKind> = self.tasks.iter().map(|t| t.task).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != self.tasks.len() {
            return Err(OrchestratorError::Config("a task is listed twice".into()));
        }
        Ok(())
    }

    pub fn task(&self, task: TaskKind) -> Result<&TaskSettings> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .ok_or_else(|| OrchestratorError::Config(format!("task {task} is not configured")))
    }
}
