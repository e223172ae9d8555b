use serde::{Deserialize, Serialize};

use super::collect::{
    collect, collect_with, episode_seeds, Autonomous, GateEvent, Rollout, ScriptedGate, Supervisor,
};
use super::config::{InterventionSource, RunConfig, TaskSettings};
use super::episode::{DatasetStore, Episode};
use super::metrics::{evaluate, Metrics};
use super::training::{baseline_on, recap_iteration, IterationResult, Pretrained, Provenance};
use super::{OrchestratorError, Result};
use crate::baselines::BaselineMethod;
use crate::policy::PolicyNet;
use crate::value::{Indicator, ValueNet};

/// Collects one iteration's data on a task: autonomous episodes from
/// `policy`, then intervention episodes under the configured corrector.
/// `ui` supplies the corrector when the source is the intervention UI.
#[allow(clippy::too_many_arguments)]
pub fn collect_iteration(
    settings: &TaskSettings,
    policy: &PolicyNet,
    critic: &ValueNet,
    k: usize,
    provenance: &str,
    config: &RunConfig,
    ui: Option<&mut dyn Supervisor>,
    gate_events: &mut Vec<GateEvent>,
) -> Result<Vec<Episode>> {
    let task = settings.task;
    let ctx = Rollout {
        policy,
        value: Some(critic),
        sampling: &config.sampling,
        init: settings.init,
        conditioning: Indicator::Positive,
        iteration: k,
        provenance,
    };
    let it = &config.iteration;
    let auto_seeds = episode_seeds(
        config.seed,
        &format!("autonomous/{task}/{k}"),
        it.autonomous_episodes,
    );
    let mut episodes = collect(&ctx, task, &auto_seeds, config.workers, |_| Autonomous)?;
    if it.intervention_episodes == 0 || it.intervention_source == InterventionSource::None {
        return Ok(episodes);
    }
    let seeds = episode_seeds(
        config.seed,
        &format!("intervention/{task}/{k}"),
        it.intervention_episodes,
    );
    match it.intervention_source {
        InterventionSource::ScriptedGate => {
            let mut gate = ScriptedGate::new(settings.gate, config.seed ^ k as u64);
            episodes.extend(collect_with(&ctx, task, &seeds, &mut gate)?);
            gate_events.append(&mut gate.events);
        }
        InterventionSource::Ui => {
            let ui = ui.ok_or_else(|| {
                OrchestratorError::Config("intervention source is ui but no session is open".into())
            })?;
            episodes.extend(collect_with(&ctx, task, &seeds, ui)?);
        }
        InterventionSource::None => {}
    }
    Ok(episodes)
}

/// Outcome of the improvement loop on one task.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub settings: TaskSettings,
    /// Demonstrations followed by every collected episode, in order.
    pub data: DatasetStore,
    /// Dataset size after each iteration's collection.
    pub sizes: Vec<usize>,
    pub iterations: Vec<IterationResult>,
    /// Evaluations of the starting policy and each iterate.
    pub metrics: Vec<Metrics>,
    pub gate_events: Vec<GateEvent>,
}

/// Latest policy and critic, falling back to the starting pair.
fn latest<'a>(
    iterations: &'a [IterationResult],
    start: &'a PolicyNet,
    pretrained: &'a Pretrained,
) -> (&'a PolicyNet, &'a ValueNet) {
    match iterations.last() {
        Some(r) => (&r.policy, &r.value),
        None => (start, &pretrained.value),
    }
}

/// Runs `config.iteration.iterations` rounds of collect and retrain on one
/// task, starting from `start` (usually the SFT policy) and the pretrained
/// critic. Each round is evaluated on the shared evaluation seeds.
pub fn run_iterations(
    settings: &TaskSettings,
    pretrained: &Pretrained,
    start: &PolicyNet,
    demos: &[Episode],
    config: &RunConfig,
    mut ui: Option<&mut dyn Supervisor>,
) -> Result<TaskRun> {
    config.validate()?;
    let task = settings.task;
    let mut run = TaskRun {
        settings: settings.clone(),
        data: DatasetStore::new(),
        sizes: Vec::new(),
        iterations: Vec::new(),
        metrics: Vec::new(),
        gate_events: Vec::new(),
    };
    run.data
        .extend(demos.iter().filter(|e| e.task == task).cloned())?;
    let eval = |label: &str, policy: &PolicyNet| {
        evaluate(
            label,
            policy,
            task,
            settings.init,
            config.iteration.eval_episodes,
            config.seed,
            &config.evaluation,
            Indicator::Positive,
            config.workers,
        )
        .map(|(m, _)| m)
    };
    run.metrics
        .push(eval(&Provenance::sft().to_string(), start)?);
    for k in 1..=config.iteration.iterations {
        let (policy, critic) = latest(&run.iterations, start, pretrained);
        let label = match k {
            1 => Provenance::sft().to_string(),
            _ => Provenance::recap(k - 1).to_string(),
        };
        let episodes = collect_iteration(
            settings,
            policy,
            critic,
            k,
            &label,
            config,
            match ui {
                Some(ref mut u) => Some(&mut **u),
                None => None,
            },
            &mut run.gate_events,
        )?;
        run.data.extend(episodes)?;
        run.sizes.push(run.data.len());
        let result = recap_iteration(run.data.episodes(), task, pretrained, k, config)?;
        log::info!(
            "{task} iteration {k}: {} steps, eps {:.4}, positive {:.3}",
            result.training_steps,
            result.epsilon,
            result.positive_fraction
        );
        run.metrics
            .push(eval(&result.policy_provenance.to_string(), &result.policy)?);
        run.iterations.push(result);
    }
    Ok(run)
}

/// Final RECAP iterate against the baselines trained on the same data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub recap: Metrics,
    pub baselines: Vec<Metrics>,
}

/// Trains each baseline from `start` on the run's dataset, with advantages
/// from the last iterate's critic, and evaluates it unconditioned.
pub fn compare(
    run: &TaskRun,
    pretrained: &Pretrained,
    start: &PolicyNet,
    methods: &[BaselineMethod],
    config: &RunConfig,
) -> Result<Comparison> {
    let task = run.settings.task;
    let recap = run
        .metrics
        .last()
        .cloned()
        .ok_or_else(|| OrchestratorError::EmptyData("run has no evaluations".into()))?;
    let (_, critic) = latest(&run.iterations, start, pretrained);
    let mut baselines = Vec::new();
    for &method in methods {
        let policy = baseline_on(run.data.episodes(), task, critic, start, method, config)?;
        let (m, _) = evaluate(
            &Provenance::baseline(method).to_string(),
            &policy,
            task,
            run.settings.init,
            config.iteration.eval_episodes,
            config.seed,
            &config.evaluation,
            Indicator::Absent,
            config.workers,
        )?;
        baselines.push(m);
    }
    Ok(Comparison { recap, baselines })
}
