//! The improvement loop end to end: demonstrations, multi-task pretraining,
//! per-task fine-tuning, gated data collection, iterated retraining from the
//! pretrained checkpoint, evaluation and baseline comparison.

mod collect;
mod config;
mod episode;
mod metrics;
mod pipeline;
mod training;

pub use collect::{
    collect, collect_demos, collect_with, demo_episode, episode_seeds, replay, run_episode,
    Autonomous, EpisodeClose, GateEvent, Rollout, ScriptedGate, StepControl, StepView, Supervisor,
};
pub use config::{
    InterventionSource, IterationConfig, RunConfig, SamplingConfig, TaskSettings, UiConfig,
};
pub use episode::{
    DatasetStore, Episode, Labeler, Source, StoreCounts, Transition, EPISODE_SCHEMA_VERSION,
};
pub use metrics::{
    evaluate, throughput_per_hour, write_metrics_csv, ArtifactEntry, DatasetEntry, Manifest,
    Metrics, GRID_STAGES, MANIFEST_SCHEMA_VERSION,
};
pub use pipeline::{collect_iteration, compare, run_iterations, Comparison, TaskRun};
pub use training::{
    baseline_on, checkpoint, episode_advantages, label_steps, pretrain, recap_iteration,
    sft_finetune, value_samples, IterationResult, LabeledSteps, Pretrained, Provenance,
    PRETRAIN_STAGE, SFT_STAGE,
};

use crate::approx::ApproxError;
use crate::baselines::BaselineError;
use crate::envs::{EnvError, TaskKind};
use crate::policy::PolicyError;
use crate::returns::ReturnsError;
use crate::value::ValueError;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("pretraining needs demonstrations for at least two tasks; missing: {0:?}")]
    MissingDemos(Vec<TaskKind>),
    #[error("no usable data: {0}")]
    EmptyData(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("the scripted gate needs a critic attached to the rollout")]
    MissingCritic,
    #[error("intervention UI: {0}")]
    Ui(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Returns(#[from] ReturnsError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;
