use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::episode::{DatasetStore, Episode, Source};
use super::{OrchestratorError, Result};
use crate::approx::Checkpoint;
use crate::baselines::{train_baseline, BaselineMethod};
use crate::envs::{Outcome, TaskKind};
use crate::policy::{
    train_policy, ActionTarget, PolicyDims, PolicyExample, PolicyNet, PolicyTrainConfig,
    PolicyTrainLog,
};
use crate::returns::discretize;
use crate::value::{
    advantages_from_values, calibrate_threshold, indicator, train_value, value_input,
    AdvantageMode, Indicator, ThresholdTable, TrainLog, ValueConfig, ValueNet, ValueSample,
};

pub const PRETRAIN_STAGE: &str = "pretrain";
pub const SFT_STAGE: &str = "sft";

/// Which training stage produced a model and what it was initialized from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub init: Option<String>,
}

impl Provenance {
    pub fn pretrain() -> Self {
        Self {
            stage: PRETRAIN_STAGE.into(),
            init: None,
        }
    }

    pub fn sft() -> Self {
        Self {
            stage: SFT_STAGE.into(),
            init: Some(PRETRAIN_STAGE.into()),
        }
    }

    pub fn recap(k: usize) -> Self {
        Self {
            stage: format!("recap-{k}"),
            init: Some(PRETRAIN_STAGE.into()),
        }
    }

    pub fn baseline(method: BaselineMethod) -> Self {
        Self {
            stage: method.to_string(),
            init: Some(SFT_STAGE.into()),
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.init {
            Some(init) => write!(f, "{} init={init}", self.stage),
            None => f.write_str(&self.stage),
        }
    }
}

impl FromStr for Provenance {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let stage = parts
            .next()
            .ok_or_else(|| OrchestratorError::Schema("empty provenance".into()))?
            .to_string();
        let init = match parts.next() {
            Some(p) => Some(
                p.strip_prefix("init=")
                    .ok_or_else(|| OrchestratorError::Schema(format!("bad provenance {s:?}")))?
                    .to_string(),
            ),
            None => None,
        };
        if parts.next().is_some() {
            return Err(OrchestratorError::Schema(format!("bad provenance {s:?}")));
        }
        Ok(Self { stage, init })
    }
}

/// Critic and/or policy with their provenance, as one checkpoint.
pub fn checkpoint(
    provenance: &Provenance,
    value: Option<&ValueNet>,
    policy: Option<&PolicyNet>,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(provenance.to_string());
    if let Some(v) = value {
        v.push_to(&mut ckpt);
    }
    if let Some(p) = policy {
        p.push_to(&mut ckpt);
    }
    ckpt
}

pub fn value_samples<'a>(
    episodes: impl IntoIterator<Item = &'a Episode>,
) -> Result<Vec<ValueSample>> {
    let mut out = Vec::new();
    for e in episodes {
        let trace = e.return_trace()?;
        for (obs, &ret) in e.observations().iter().zip(&trace.values) {
            out.push(ValueSample {
                input: value_input(obs, e.task),
                bin: discretize(ret)?,
            });
        }
    }
    Ok(out)
}

/// Advantages of every action of `episode` under `value`.
pub fn episode_advantages(
    episode: &Episode,
    value: &ValueNet,
    mode: AdvantageMode,
) -> Result<Vec<f64>> {
    let inputs: Vec<Vec<f64>> = episode
        .observations()
        .iter()
        .map(|o| value_input(o, episode.task))
        .collect();
    let values = value.expected_batch(&inputs);
    let returns = episode.return_trace()?.values;
    Ok(advantages_from_values(&values, &returns, mode))
}

/// Per-step training data for one task, with the threshold used.
#[derive(Debug, Clone)]
pub struct LabeledSteps {
    pub examples: Vec<PolicyExample>,
    pub advantages: Vec<f64>,
    pub forced: Vec<bool>,
    pub epsilon: f64,
    /// Positive share among steps whose indicator was computed, not forced.
    pub positive_fraction: f64,
}

/// Scores every step, calibrates the threshold on the non-forced ones and
/// assigns indicators. Intervention steps are forced positive.
pub fn label_steps(
    episodes: &[Episode],
    task: TaskKind,
    value: &ValueNet,
    mode: AdvantageMode,
    fraction: f64,
    seed: u64,
) -> Result<LabeledSteps> {
    let mut examples = Vec::new();
    let mut advantages = Vec::new();
    let mut forced = Vec::new();
    for e in episodes.iter().filter(|e| e.task == task) {
        let adv = episode_advantages(e, value, mode)?;
        for (tr, a) in e.transitions.iter().zip(adv) {
            examples.push(PolicyExample {
                obs: tr.observation.clone(),
                task: task.index(),
                indicator: None,
                target: ActionTarget::from_chunk(&tr.action),
            });
            advantages.push(a);
            forced.push(tr.source == Source::Intervention);
        }
    }
    let free: Vec<f64> = advantages
        .iter()
        .zip(&forced)
        .filter(|(_, &f)| !f)
        .map(|(&a, _)| a)
        .collect();
    let epsilon = calibrate_threshold(&free, fraction, task, seed)?.epsilon;
    let mut positives = 0;
    for ((ex, &a), &f) in examples.iter_mut().zip(&advantages).zip(&forced) {
        let ind = indicator(a, epsilon, f);
        if !f && ind == Indicator::Positive {
            positives += 1;
        }
        ex.indicator = Some(ind);
    }
    Ok(LabeledSteps {
        examples,
        advantages,
        forced,
        epsilon,
        positive_fraction: positives as f64 / free.len().max(1) as f64,
    })
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub value: ValueNet,
    pub policy: PolicyNet,
    pub thresholds: ThresholdTable,
    pub positive_fractions: BTreeMap<TaskKind, f64>,
    pub value_log: TrainLog,
    pub policy_log: PolicyTrainLog,
}

impl Pretrained {
    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint(
            &Provenance::pretrain(),
            Some(&self.value),
            Some(&self.policy),
        )
    }
}

fn with_seed(config: &ValueConfig, seed: u64) -> ValueConfig {
    ValueConfig {
        seed,
        ..config.clone()
    }
}

fn policy_seed(config: &PolicyTrainConfig, seed: u64) -> PolicyTrainConfig {
    PolicyTrainConfig {
        seed,
        ..config.clone()
    }
}

/// Multi-task pretraining: critic on all demos with Monte-Carlo returns,
/// per-task thresholds, then the conditioned policy on every task.
pub fn pretrain(demos: &DatasetStore, config: &RunConfig) -> Result<Pretrained> {
    let present = demos.tasks();
    if present.len() < 2 {
        let missing: Vec<TaskKind> = config
            .tasks
            .iter()
            .map(|t| t.task)
            .filter(|t| !present.contains(t))
            .collect();
        return Err(OrchestratorError::MissingDemos(missing));
    }
    let samples = value_samples(demos.episodes())?;
    let (value, value_log) = train_value(None, &samples, &with_seed(&config.value, config.seed))?;
    let mut thresholds = ThresholdTable::new(config.iteration.pretrain_positive_fraction);
    let mut positive_fractions = BTreeMap::new();
    let mut examples = Vec::new();
    for &task in &present {
        let labeled = label_steps(
            demos.episodes(),
            task,
            &value,
            AdvantageMode::MonteCarlo,
            config.iteration.pretrain_positive_fraction,
            config.seed,
        )?;
        thresholds.thresholds.insert(task, labeled.epsilon);
        positive_fractions.insert(task, labeled.positive_fraction);
        examples.extend(labeled.examples);
    }
    let init = PolicyNet::new(PolicyDims::tasks(), &config.policy_arch, config.seed)?;
    let (policy, policy_log) = train_policy(
        &init,
        &examples,
        &policy_seed(&config.pretrain, config.seed),
    )?;
    Ok(Pretrained {
        value,
        policy,
        thresholds,
        positive_fractions,
        value_log,
        policy_log,
    })
}

/// Task fine-tuning on demonstrations with every indicator positive.
pub fn sft_finetune(
    pretrained: &PolicyNet,
    demos: &[Episode],
    config: &PolicyTrainConfig,
) -> Result<PolicyNet> {
    let examples: Vec<PolicyExample> = demos
        .iter()
        .flat_map(|e| {
            e.transitions.iter().map(move |tr| PolicyExample {
                obs: tr.observation.clone(),
                task: e.task.index(),
                indicator: Some(Indicator::Positive),
                target: ActionTarget::from_chunk(&tr.action),
            })
        })
        .collect();
    if examples.is_empty() {
        return Err(OrchestratorError::EmptyData(
            "no demonstration steps for fine-tuning".into(),
        ));
    }
    Ok(train_policy(pretrained, &examples, config)?.0)
}

#[derive(Debug, Clone)]
pub struct IterationResult {
    pub k: usize,
    pub value: ValueNet,
    pub policy: PolicyNet,
    pub value_provenance: Provenance,
    pub policy_provenance: Provenance,
    pub epsilon: f64,
    pub positive_fraction: f64,
    pub forced_steps: usize,
    /// Forced steps that entered training with a positive indicator.
    pub forced_positive: usize,
    pub training_steps: usize,
    pub value_log: TrainLog,
    pub policy_log: PolicyTrainLog,
}

impl IterationResult {
    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint(
            &self.policy_provenance,
            Some(&self.value),
            Some(&self.policy),
        )
    }
}

/// One improvement step on task data: critic and policy are both
/// re-initialized from the pretrained checkpoint.
pub fn recap_iteration(
    data: &[Episode],
    task: TaskKind,
    pretrained: &Pretrained,
    k: usize,
    config: &RunConfig,
) -> Result<IterationResult> {
    if k < 1 {
        return Err(OrchestratorError::Config(
            "iteration index starts at 1".into(),
        ));
    }
    let data: Vec<Episode> = data.iter().filter(|e| e.task == task).cloned().collect();
    if data.is_empty() {
        return Err(OrchestratorError::EmptyData(format!("no {task} episodes")));
    }
    let seed = config.seed.wrapping_add(1000 * k as u64);
    let samples = value_samples(&data)?;
    let (value, value_log) = train_value(
        Some(&pretrained.value),
        &samples,
        &with_seed(&config.value, seed),
    )?;
    let kept: Vec<Episode> = data
        .into_iter()
        .filter(|e| {
            config.iteration.include_failed_autonomous
                || e.outcome == Outcome::Success
                || e.transitions.iter().all(|t| t.source != Source::Autonomous)
        })
        .collect();
    let labeled = label_steps(
        &kept,
        task,
        &value,
        config.iteration.advantage_mode,
        config.iteration.positive_fraction,
        seed,
    )?;
    let forced_steps = labeled.forced.iter().filter(|&&f| f).count();
    let forced_positive = labeled
        .examples
        .iter()
        .zip(&labeled.forced)
        .filter(|(e, &f)| f && e.indicator == Some(Indicator::Positive))
        .count();
    let (policy, policy_log) = train_policy(
        &pretrained.policy,
        &labeled.examples,
        &policy_seed(&config.finetune, seed),
    )?;
    Ok(IterationResult {
        k,
        value,
        policy,
        value_provenance: Provenance::recap(k),
        policy_provenance: Provenance::recap(k),
        epsilon: labeled.epsilon,
        positive_fraction: labeled.positive_fraction,
        forced_steps,
        forced_positive,
        training_steps: labeled.examples.len(),
        value_log,
        policy_log,
    })
}

/// Trains a comparison baseline on task data, starting from `init`, with
/// advantages from `value`.
pub fn baseline_on(
    data: &[Episode],
    task: TaskKind,
    value: &ValueNet,
    init: &PolicyNet,
    method: BaselineMethod,
    config: &RunConfig,
) -> Result<PolicyNet> {
    let mut examples = Vec::new();
    let mut advantages = Vec::new();
    for e in data.iter().filter(|e| e.task == task) {
        let adv = episode_advantages(e, value, config.iteration.advantage_mode)?;
        for (tr, a) in e.transitions.iter().zip(adv) {
            examples.push(PolicyExample {
                obs: tr.observation.clone(),
                task: task.index(),
                indicator: Some(Indicator::Absent),
                target: ActionTarget::from_chunk(&tr.action),
            });
            advantages.push(a);
        }
    }
    if examples.is_empty() {
        return Err(OrchestratorError::EmptyData(format!("no {task} episodes")));
    }
    let mut bc = config.baselines.clone();
    bc.train = policy_seed(&bc.train, config.seed);
    Ok(train_baseline(init, &examples, &advantages, method, &bc)?.0)
}
