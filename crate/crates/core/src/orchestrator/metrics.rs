use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::collect::{collect, episode_seeds, replay, Autonomous, Rollout};
use super::config::{RunConfig, SamplingConfig};
use super::episode::Episode;
use super::Result;
use crate::envs::{InitSet, Outcome, TaskKind};
use crate::policy::PolicyNet;
use crate::value::{Indicator, ThresholdTable};

/// Number of stages GridFold reports progress on.
pub const GRID_STAGES: usize = 3;

/// Successes per simulated hour.
pub fn throughput_per_hour(successes: usize, simulated_seconds: f64) -> f64 {
    if simulated_seconds > 0.0 {
        successes as f64 / (simulated_seconds / 3600.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Checkpoint or method the rollouts came from.
    pub label: String,
    pub task: TaskKind,
    pub beta: f64,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub success_stderr: f64,
    /// Successes per simulated hour.
    pub throughput_per_hour: f64,
    pub simulated_seconds: f64,
    pub mean_steps: f64,
    /// Share of episodes completing each stage (GridFold only).
    pub stage_success: Vec<f64>,
    /// Episodes that reached the goal through the incorrect mode.
    pub wrong_mode: usize,
}

impl Metrics {
    pub fn from_episodes(
        label: &str,
        task: TaskKind,
        beta: f64,
        episodes: &[Episode],
    ) -> Result<Self> {
        let n = episodes.len();
        let successes = episodes
            .iter()
            .filter(|e| e.outcome == Outcome::Success)
            .count();
        let seconds: f64 = episodes.iter().map(Episode::simulated_seconds).sum();
        let p = if n == 0 {
            0.0
        } else {
            successes as f64 / n as f64
        };
        let mut stage_counts = [0usize; GRID_STAGES];
        let mut wrong_mode = 0;
        for e in episodes {
            let env = replay(e)?;
            if task == TaskKind::GridFold {
                for (s, c) in stage_counts.iter_mut().enumerate() {
                    if env.stage_reached() > s {
                        *c += 1;
                    }
                }
            }
            if env.as_point_mass().is_some_and(|pm| pm.state().wrong_mode) {
                wrong_mode += 1;
            }
        }
        let stage_success = if task == TaskKind::GridFold {
            stage_counts
                .iter()
                .map(|&c| c as f64 / n.max(1) as f64)
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            label: label.to_string(),
            task,
            beta,
            episodes: n,
            successes,
            success_rate: p,
            success_stderr: if n == 0 {
                0.0
            } else {
                (p * (1.0 - p) / n as f64).sqrt()
            },
            throughput_per_hour: throughput_per_hour(successes, seconds),
            simulated_seconds: seconds,
            mean_steps: if n == 0 {
                0.0
            } else {
                episodes.iter().map(|e| e.wall_steps as f64).sum::<f64>() / n as f64
            },
            stage_success,
            wrong_mode,
        })
    }
}

/// Seeded evaluation rollouts of `policy`, conditioned as `conditioning`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    label: &str,
    policy: &PolicyNet,
    task: TaskKind,
    init: InitSet,
    episodes: usize,
    seed: u64,
    sampling: &SamplingConfig,
    conditioning: Indicator,
    workers: usize,
) -> Result<(Metrics, Vec<Episode>)> {
    let ctx = Rollout {
        policy,
        value: None,
        sampling,
        init,
        conditioning,
        iteration: 0,
        provenance: label,
    };
    let seeds = episode_seeds(seed, &format!("eval/{task}"), episodes);
    let eps = collect(&ctx, task, &seeds, workers, |_| Autonomous)?;
    // Guidance only applies to positive conditioning.
    let beta = if conditioning == Indicator::Positive {
        sampling.beta
    } else {
        1.0
    };
    Ok((Metrics::from_episodes(label, task, beta, &eps)?, eps))
}

/// Flat CSV row; stages beyond the task's count are left empty.
#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    label: &'a str,
    task: TaskKind,
    beta: f64,
    episodes: usize,
    successes: usize,
    success_rate: f64,
    success_stderr: f64,
    throughput_per_hour: f64,
    simulated_seconds: f64,
    mean_steps: f64,
    stage1: Option<f64>,
    stage2: Option<f64>,
    stage3: Option<f64>,
    wrong_mode: usize,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[Metrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(MetricsRow {
            label: &m.label,
            task: m.task,
            beta: m.beta,
            episodes: m.episodes,
            successes: m.successes,
            success_rate: m.success_rate,
            success_stderr: m.success_stderr,
            throughput_per_hour: m.throughput_per_hour,
            simulated_seconds: m.simulated_seconds,
            mean_steps: m.mean_steps,
            stage1: m.stage_success.first().copied(),
            stage2: m.stage_success.get(1).copied(),
            stage3: m.stage_success.get(2).copied(),
            wrong_mode: m.wrong_mode,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub path: String,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub task: TaskKind,
    pub path: String,
    pub episodes: usize,
}

/// Links a run's checkpoints, data, thresholds and metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub checkpoints: Vec<ArtifactEntry>,
    pub datasets: Vec<DatasetEntry>,
    pub thresholds: BTreeMap<String, ThresholdTable>,
    pub metrics_csv: Option<String>,
    pub metrics: Vec<Metrics>,
}

impl Manifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed: config.seed,
            config: config.clone(),
            checkpoints: Vec::new(),
            datasets: Vec::new(),
            thresholds: BTreeMap::new(),
            metrics_csv: None,
            metrics: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Replaces any entry with the same name.
    pub fn record_checkpoint(&mut self, entry: ArtifactEntry) {
        self.checkpoints.retain(|c| c.name != entry.name);
        self.checkpoints.push(entry);
    }

    pub fn record_dataset(&mut self, entry: DatasetEntry) {
        self.datasets.retain(|d| d.path != entry.path);
        self.datasets.push(entry);
    }
}
