//! Sparse step-count rewards, undiscounted returns, per-task normalization
//! and the 201-bin value discretization.

use crate::envs::{EnvSpec, Outcome, TaskKind};

/// Number of value bins spanning [−1, 0].
pub const NUM_BINS: usize = 201;
const LAST_BIN: f64 = (NUM_BINS - 1) as f64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReturnsError {
    #[error("episode has no terminal outcome")]
    MissingOutcome,
    #[error("normalized return {0} outside [-1, 0]")]
    OutOfRange(f64),
    #[error("bin {0} outside [0, 200]")]
    BadBin(usize),
    #[error("max episode length must be >= 1")]
    BadMaxLength,
}

pub type Result<T> = std::result::Result<T, ReturnsError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardedEpisode {
    pub task: TaskKind,
    pub outcome: Outcome,
    /// Number of actions taken; rewards has `length + 1` entries.
    pub length: usize,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedReturnTrace {
    pub values: Vec<f64>,
    pub bins: Vec<usize>,
}

/// `−1` per step, then `0` on success or `−L_max` on failure at the terminal.
pub fn rewards_from_outcome(
    outcome: Outcome,
    length: usize,
    spec: &EnvSpec,
) -> Result<RewardedEpisode> {
    let terminal = match outcome {
        Outcome::None => return Err(ReturnsError::MissingOutcome),
        Outcome::Success => 0.0,
        Outcome::Failure => -failure_cost(spec),
    };
    let mut rewards = vec![-1.0; length];
    rewards.push(terminal);
    Ok(RewardedEpisode {
        task: spec.task,
        outcome,
        length,
        rewards,
    })
}

pub fn failure_cost(spec: &EnvSpec) -> f64 {
    spec.max_steps as f64
}

/// Reward-to-go `R_t = Σ_{t' ≥ t} r_{t'}`.
pub fn returns(rewarded: &RewardedEpisode) -> Vec<f64> {
    let mut out = vec![0.0; rewarded.rewards.len()];
    let mut acc = 0.0;
    for (slot, r) in out.iter_mut().zip(&rewarded.rewards).rev() {
        acc += r;
        *slot = acc;
    }
    out
}

pub fn normalize_returns(returns: &[f64], max_steps: usize) -> Result<NormalizedReturnTrace> {
    if max_steps < 1 {
        return Err(ReturnsError::BadMaxLength);
    }
    let values: Vec<f64> = returns
        .iter()
        .map(|r| (r / max_steps as f64).clamp(-1.0, 0.0))
        .collect();
    let bins = values
        .iter()
        .map(|&v| discretize(v))
        .collect::<Result<_>>()?;
    Ok(NormalizedReturnTrace { values, bins })
}

/// Per-step rewards in normalized units, read off the clamped return trace
/// so that they sum back to it exactly: `r̂_t = R̂_t − R̂_{t+1}`, `r̂_T = R̂_T`.
pub fn normalized_rewards(trace: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    for t in 0..trace.len() {
        let next = trace.get(t + 1).copied().unwrap_or(0.0);
        out.push(trace[t] - next);
    }
    out
}

/// Outcome → normalized return trace in one go.
pub fn normalized_trace(
    outcome: Outcome,
    length: usize,
    spec: &EnvSpec,
) -> Result<NormalizedReturnTrace> {
    normalize_returns(
        &returns(&rewards_from_outcome(outcome, length, spec)?),
        spec.max_steps,
    )
}

pub fn discretize(x: f64) -> Result<usize> {
    if !(-1.0..=0.0).contains(&x) {
        return Err(ReturnsError::OutOfRange(x));
    }
    Ok(((x + 1.0) * LAST_BIN).round() as usize)
}

pub fn undiscretize(bin: usize) -> Result<f64> {
    if bin >= NUM_BINS {
        return Err(ReturnsError::BadBin(bin));
    }
    Ok(bin_value(bin))
}

/// Value at the center of `bin`, unchecked.
pub fn bin_value(bin: usize) -> f64 {
    -1.0 + bin as f64 / LAST_BIN
}
