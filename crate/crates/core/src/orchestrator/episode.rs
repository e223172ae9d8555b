use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OrchestratorError, Result};
use crate::envs::{spec_for, ActionChunk, InitSet, Outcome, TaskKind};
use crate::returns::{normalized_trace, NormalizedReturnTrace};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Demo,
    Autonomous,
    Intervention,
}

/// Who decided the stored outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    Environment,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub observation: Vec<f64>,
    pub action: ActionChunk,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub schema_version: u32,
    pub task: TaskKind,
    pub seed: u64,
    pub init: InitSet,
    pub transitions: Vec<Transition>,
    /// Observation after the last action.
    pub final_observation: Vec<f64>,
    pub outcome: Outcome,
    pub labeler: Labeler,
    /// Simulated environment steps the episode consumed.
    pub wall_steps: usize,
    /// Collection iteration; 0 for demonstrations and evaluation rollouts.
    pub iteration: usize,
    /// Provenance of the policy (or demonstrator) that produced the episode.
    pub provenance: String,
    /// The UI client disconnected before the episode finished.
    #[serde(default)]
    pub ui_dropped: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Observations `o_0..=o_T`, including the terminal one.
    pub fn observations(&self) -> Vec<Vec<f64>> {
        let mut obs: Vec<Vec<f64>> = self
            .transitions
            .iter()
            .map(|t| t.observation.clone())
            .collect();
        obs.push(self.final_observation.clone());
        obs
    }

    pub fn return_trace(&self) -> Result<NormalizedReturnTrace> {
        Ok(normalized_trace(
            self.outcome,
            self.len(),
            &spec_for(self.task),
        )?)
    }

    pub fn simulated_seconds(&self) -> f64 {
        self.wall_steps as f64 * spec_for(self.task).step_duration
    }

    pub fn count(&self, source: Source) -> usize {
        self.transitions
            .iter()
            .filter(|t| t.source == source)
            .count()
    }

    /// Maximal runs of intervention-sourced steps, as step-index ranges.
    pub fn intervention_segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, tr) in self.transitions.iter().enumerate() {
            match (tr.source == Source::Intervention, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s..self.transitions.len());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(OrchestratorError::Schema(format!(
                "episode schema version {} (expected {EPISODE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.outcome == Outcome::None {
            return Err(OrchestratorError::Schema("episode without outcome".into()));
        }
        if self.transitions.is_empty() {
            return Err(OrchestratorError::Schema(
                "episode without transitions".into(),
            ));
        }
        if self.transitions.iter().enumerate().any(|(i, t)| t.t != i) {
            return Err(OrchestratorError::Schema(
                "transition steps are not 0..T".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreCounts {
    pub episodes: usize,
    pub steps_by_source: BTreeMap<Source, usize>,
    pub episodes_by_iteration: BTreeMap<usize, usize>,
}

/// Append-only episode collection.
#[derive(Debug, Clone, Default)]
pub struct DatasetStore {
    episodes: Vec<Episode>,
}

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        self.episodes.push(episode);
        Ok(())
    }

    pub fn extend(&mut self, episodes: impl IntoIterator<Item = Episode>) -> Result<()> {
        for e in episodes {
            self.append(e)?;
        }
        Ok(())
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut tasks: Vec<TaskKind> = self.episodes.iter().map(|e| e.task).collect();
        tasks.sort();
        tasks.dedup();
        tasks
    }

    pub fn for_task(&self, task: TaskKind) -> Vec<Episode> {
        self.episodes
            .iter()
            .filter(|e| e.task == task)
            .cloned()
            .collect()
    }

    pub fn counts(&self, task: Option<TaskKind>) -> StoreCounts {
        let mut c = StoreCounts::default();
        for e in self
            .episodes
            .iter()
            .filter(|e| task.is_none_or(|t| e.task == t))
        {
            c.episodes += 1;
            *c.episodes_by_iteration.entry(e.iteration).or_default() += 1;
            for tr in &e.transitions {
                *c.steps_by_source.entry(tr.source).or_default() += 1;
            }
        }
        c
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let episode: Episode = serde_json::from_str(&line)
                .map_err(|e| OrchestratorError::Schema(format!("line {}: {e}", n + 1)))?;
            store.append(episode)?;
        }
        Ok(store)
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.episodes {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Appends `episodes` to the store and to the file at `path`.
    pub fn append_to_file(&mut self, path: impl AsRef<Path>, episodes: Vec<Episode>) -> Result<()> {
        let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        for e in episodes {
            e.validate()?;
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n")?;
            self.episodes.push(e);
        }
        w.flush()?;
        Ok(())
    }
}
