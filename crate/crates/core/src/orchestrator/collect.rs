use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{SamplingConfig, TaskSettings};
use super::episode::{Episode, Labeler, Source, Transition, EPISODE_SCHEMA_VERSION};
use super::Result;
use crate::envs::{
    ActionChunk, Env, Gate, GateConfig, GateDecision, InitSet, Observation, Outcome, TaskKind,
};
use crate::policy::{PolicyInput, PolicyNet};
use crate::value::{Indicator, ValueEstimator, ValueNet};

/// `n` episode seeds drawn from the stream named `label` under `base`.
pub fn episode_seeds(base: u64, label: &str, n: usize) -> Vec<u64> {
    // FNV-1a over the label picks the stream.
    let stream = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    (0..n).map(|_| rng.random()).collect()
}

/// What a supervisor sees before each step.
pub struct StepView<'a> {
    pub episode: u64,
    pub env: &'a Env,
    pub observation: &'a Observation,
    /// Critic value of the observation, when a critic is attached.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepControl {
    Policy,
    /// The supervisor drives this step with the given chunk.
    Override(ActionChunk),
}

/// How an episode was closed by its supervisor.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpisodeClose {
    /// Outcome label overriding the environment's predicate.
    pub label: Option<Outcome>,
    pub ui_dropped: bool,
}

/// Decides, step by step, whether the policy or a corrector acts.
pub trait Supervisor {
    fn begin_episode(&mut self, _episode: u64, _env: &Env) -> Result<()> {
        Ok(())
    }

    fn control(&mut self, view: &StepView<'_>) -> Result<StepControl>;

    fn end_episode(&mut self, _episode: u64, _env: &Env) -> Result<EpisodeClose> {
        Ok(EpisodeClose::default())
    }
}

/// Never intervenes.
#[derive(Debug, Clone, Copy, Default)]
pub struct Autonomous;

impl Supervisor for Autonomous {
    fn control(&mut self, _view: &StepView<'_>) -> Result<StepControl> {
        Ok(StepControl::Policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateEvent {
    pub episode: u64,
    pub t: usize,
    pub decision: GateDecision,
}

/// Scripted stand-in for a monitoring expert: the gate watches the critic
/// and the failure distance, and the noiseless expert acts while it holds
/// control.
#[derive(Debug, Clone)]
pub struct ScriptedGate {
    config: GateConfig,
    gate: Gate,
    rng: ChaCha8Rng,
    pub events: Vec<GateEvent>,
}

impl ScriptedGate {
    pub fn new(config: GateConfig, seed: u64) -> Self {
        Self {
            config,
            gate: Gate::new(config),
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: Vec::new(),
        }
    }
}

impl Supervisor for ScriptedGate {
    fn begin_episode(&mut self, _episode: u64, _env: &Env) -> Result<()> {
        self.gate = Gate::new(self.config);
        Ok(())
    }

    fn control(&mut self, view: &StepView<'_>) -> Result<StepControl> {
        let value = view.value.ok_or(super::OrchestratorError::MissingCritic)?;
        let decision = self.gate.observe(value, view.env.failure_distance());
        if decision != GateDecision::Continue {
            self.events.push(GateEvent {
                episode: view.episode,
                t: view.observation.t,
                decision,
            });
        }
        if self.gate.is_intervening() {
            Ok(StepControl::Override(
                view.env.expert_action(0.0, &mut self.rng),
            ))
        } else {
            Ok(StepControl::Policy)
        }
    }
}

/// Everything a policy rollout needs besides the environment.
#[derive(Clone, Copy)]
pub struct Rollout<'a> {
    pub policy: &'a PolicyNet,
    pub value: Option<&'a ValueNet>,
    pub sampling: &'a SamplingConfig,
    pub init: InitSet,
    /// Indicator the policy is conditioned on. `Positive` honours the
    /// guidance weight; other codes sample that conditional directly.
    pub conditioning: Indicator,
    pub iteration: usize,
    pub provenance: &'a str,
}

/// Runs one episode. Returns `None` when the policy produced a non-finite
/// action; the episode is discarded and a diagnostic logged.
pub fn run_episode(
    ctx: &Rollout<'_>,
    env: &mut Env,
    seed: u64,
    episode: u64,
    supervisor: &mut dyn Supervisor,
) -> Result<Option<Episode>> {
    let task = env.task();
    let mut obs = env.reset(seed, ctx.init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_e5ee_d000_0001);
    supervisor.begin_episode(episode, env)?;
    let mut transitions = Vec::new();
    while !env.is_terminal() {
        let value = ctx.value.map(|v| v.value(&obs.features, task));
        let view = StepView {
            episode,
            env,
            observation: &obs,
            value,
        };
        let (action, source) = match supervisor.control(&view)? {
            StepControl::Override(a) => (a, Source::Intervention),
            StepControl::Policy => {
                let a = if ctx.conditioning == Indicator::Positive {
                    ctx.policy.sample_actions_cfg(
                        &obs.features,
                        task.index(),
                        ctx.sampling.beta,
                        ctx.sampling.flow_steps,
                        &mut rng,
                    )?
                } else {
                    let input = PolicyInput::new(&obs.features, task.index(), ctx.conditioning);
                    ctx.policy
                        .sample_actions(&input, ctx.sampling.flow_steps, &mut rng)?
                };
                (a, Source::Autonomous)
            }
        };
        if action
            .commands()
            .is_some_and(|c| c.iter().any(|x| !x.is_finite()))
        {
            log::warn!(
                "{task} episode {episode} (seed {seed}): non-finite action at t={}; discarded",
                obs.t
            );
            return Ok(None);
        }
        let result = env.step(&action)?;
        transitions.push(Transition {
            t: obs.t,
            observation: obs.features,
            action,
            source,
        });
        obs = result.observation;
    }
    let close = supervisor.end_episode(episode, env)?;
    let (outcome, labeler) = match close.label {
        Some(label) => (label, Labeler::Human),
        None => (env.outcome(), Labeler::Environment),
    };
    Ok(Some(Episode {
        schema_version: EPISODE_SCHEMA_VERSION,
        task,
        seed,
        init: ctx.init,
        wall_steps: transitions.len(),
        transitions,
        final_observation: obs.features,
        outcome,
        labeler,
        iteration: ctx.iteration,
        provenance: ctx.provenance.to_string(),
        ui_dropped: close.ui_dropped,
    }))
}

/// Sequential collection sharing one supervisor across episodes.
pub fn collect_with(
    ctx: &Rollout<'_>,
    task: TaskKind,
    seeds: &[u64],
    supervisor: &mut dyn Supervisor,
) -> Result<Vec<Episode>> {
    let mut env = Env::new(task);
    let mut out = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        out.extend(run_episode(ctx, &mut env, seed, i as u64, supervisor)?);
    }
    Ok(out)
}

/// Collection over `workers` threads, each owning an environment and a
/// supervisor built by `make`. Episodes come back in seed order.
pub fn collect<S, F>(
    ctx: &Rollout<'_>,
    task: TaskKind,
    seeds: &[u64],
    workers: usize,
    make: F,
) -> Result<Vec<Episode>>
where
    S: Supervisor,
    F: Fn(usize) -> S + Sync,
{
    let workers = workers.clamp(1, seeds.len().max(1));
    if workers == 1 {
        return collect_with(ctx, task, seeds, &mut make(0));
    }
    let per = seeds.len().div_ceil(workers);
    let results: Vec<Result<Vec<Episode>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(per)
            .enumerate()
            .map(|(w, chunk)| {
                let make = &make;
                scope.spawn(move || {
                    let mut env = Env::new(task);
                    let mut sup = make(w);
                    let mut out = Vec::with_capacity(chunk.len());
                    for (i, &seed) in chunk.iter().enumerate() {
                        let id = (w * per + i) as u64;
                        out.extend(run_episode(ctx, &mut env, seed, id, &mut sup)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collection worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// One demonstration from the task's demonstrator.
pub fn demo_episode(env: &mut Env, seed: u64, init: InitSet, noise: f64) -> Result<Episode> {
    let mut obs = env.reset(seed, init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd3_3d00);
    let mut transitions = Vec::new();
    while !env.is_terminal() {
        let action = env.demo_action(noise, &mut rng);
        let result = env.step(&action)?;
        transitions.push(Transition {
            t: obs.t,
            observation: obs.features,
            action,
            source: Source::Demo,
        });
        obs = result.observation;
    }
    Ok(Episode {
        schema_version: EPISODE_SCHEMA_VERSION,
        task: env.task(),
        seed,
        init,
        wall_steps: transitions.len(),
        transitions,
        final_observation: obs.features,
        outcome: env.outcome(),
        labeler: Labeler::Environment,
        iteration: 0,
        provenance: "demonstrator".into(),
        ui_dropped: false,
    })
}

pub fn collect_demos(settings: &TaskSettings, seed: u64) -> Result<Vec<Episode>> {
    let mut env = Env::new(settings.task);
    episode_seeds(
        seed,
        &format!("demo/{}", settings.task),
        settings.demo_episodes,
    )
    .into_iter()
    .map(|s| demo_episode(&mut env, s, settings.init, settings.demo_noise))
    .collect()
}

/// Re-executes a stored episode's actions from its seed.
pub fn replay(episode: &Episode) -> Result<Env> {
    let mut env = Env::new(episode.task);
    env.reset(episode.seed, episode.init);
    for tr in &episode.transitions {
        if env.is_terminal() {
            break;
        }
        env.step(&tr.action)?;
    }
    Ok(env)
}
