//! Multi-task distributional critic over normalized returns, advantage
//! estimation, threshold calibration and improvement indicators.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{
    softmax, Activation, AdamConfig, ApproxError, Checkpoint, Matrix, Network, OptimizerState,
    OutputLoss, SoftmaxCrossEntropy,
};
use crate::envs::{TaskKind, OBS_DIM};
use crate::returns::{bin_value, NUM_BINS};

pub const VALUE_INPUT_DIM: usize = OBS_DIM + TaskKind::ALL.len();
/// Largest advantage sample used for threshold calibration.
pub const CALIBRATION_CAP: usize = 10_000;
pub const MIN_CALIBRATION_SAMPLES: usize = 100;
const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ValueError {
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("distribution is not on the simplex (sum {sum}, min {min})")]
    NotSimplex { sum: f64, min: f64 },
    #[error("step {t} outside episode of length {len}")]
    StepOutOfRange { t: usize, len: usize },
    #[error("{got} advantage samples for {task}, need at least {MIN_CALIBRATION_SAMPLES}")]
    TooFewSamples { task: TaskKind, got: usize },
    #[error("target positive fraction {0} outside (0, 1)")]
    BadFraction(f64),
}

pub type Result<T> = std::result::Result<T, ValueError>;

/// Critic input: observation features followed by the task one-hot.
pub fn value_input(features: &[f64], task: TaskKind) -> Vec<f64> {
    let mut x = Vec::with_capacity(VALUE_INPUT_DIM);
    x.extend_from_slice(features);
    x.resize(OBS_DIM, 0.0);
    let mut onehot = [0.0; 3];
    onehot[task.index()] = 1.0;
    x.extend_from_slice(&onehot);
    x
}

/// `Σ_b p(b)·v(b)` for a distribution over the value bins.
pub fn expected_value(dist: &[f64]) -> Result<f64> {
    let sum: f64 = dist.iter().sum();
    let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    if dist.len() != NUM_BINS || (sum - 1.0).abs() > SIMPLEX_TOLERANCE || min < -SIMPLEX_TOLERANCE {
        return Err(ValueError::NotSimplex { sum, min });
    }
    Ok(expected_unchecked(dist))
}

fn expected_unchecked(dist: &[f64]) -> f64 {
    let v: f64 = dist.iter().enumerate().map(|(b, p)| p * bin_value(b)).sum();
    v.clamp(-1.0, 0.0)
}

/// Anything that can score observations with a scalar value.
pub trait ValueEstimator {
    fn value(&self, features: &[f64], task: TaskKind) -> f64;

    fn values(&self, features: &[Vec<f64>], task: TaskKind) -> Vec<f64> {
        features.iter().map(|f| self.value(f, task)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One critic training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub input: Vec<f64>,
    pub bin: usize,
}

#[derive(Debug, Clone)]
pub struct ValueNet {
    net: Network,
}

impl ValueNet {
    pub fn new(hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![VALUE_INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(NUM_BINS);
        Ok(Self {
            net: Network::new(&sizes, Activation::Tanh, Activation::Identity, seed)?,
        })
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.input_dim() != VALUE_INPUT_DIM || net.output_dim() != NUM_BINS {
            return Err(ApproxError::InvalidArchitecture(format!(
                "critic needs {VALUE_INPUT_DIM} inputs and {NUM_BINS} outputs"
            ))
            .into());
        }
        Ok(Self { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn distribution(&self, features: &[f64], task: TaskKind) -> Vec<f64> {
        let logits = self
            .net
            .forward(&value_input(features, task))
            .expect("critic input width");
        softmax(&logits)
    }

    /// Expected values for a batch of already-built critic inputs.
    pub fn expected_batch(&self, inputs: &[Vec<f64>]) -> Vec<f64> {
        if inputs.is_empty() {
            return Vec::new();
        }
        let out = self
            .net
            .forward_batch(&Matrix::from_rows(inputs))
            .expect("critic input width");
        (0..inputs.len())
            .map(|r| expected_unchecked(&softmax(out.row(r))))
            .collect()
    }

    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        ckpt.push_network("value.", &self.net);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_network(ckpt.network("value.")?)
    }
}

impl ValueEstimator for ValueNet {
    fn value(&self, features: &[f64], task: TaskKind) -> f64 {
        expected_unchecked(&self.distribution(features, task))
    }

    fn values(&self, features: &[Vec<f64>], task: TaskKind) -> Vec<f64> {
        let inputs: Vec<Vec<f64>> = features.iter().map(|f| value_input(f, task)).collect();
        self.expected_batch(&inputs)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training against discretized returns, starting from `init`
/// (or a fresh network when `None`).
pub fn train_value(
    init: Option<&ValueNet>,
    samples: &[ValueSample],
    config: &ValueConfig,
) -> Result<(ValueNet, TrainLog)> {
    if samples.is_empty() {
        return Err(ValueError::EmptyDataset);
    }
    let mut value = match init {
        Some(v) => v.clone(),
        None => ValueNet::new(&config.hidden, config.seed)?,
    };
    let mut opt = OptimizerState::new(&value.net, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<(Vec<f64>, SoftmaxCrossEntropy)> = chunk
                .iter()
                .map(|&i| {
                    (
                        samples[i].input.clone(),
                        SoftmaxCrossEntropy {
                            target: samples[i].bin,
                        },
                    )
                })
                .collect();
            let (loss, grads) = value.net.loss_and_gradients(&batch)?;
            opt.step(&mut value.net, &grads)?;
            total += loss * chunk.len() as f64;
        }
        log.epoch_losses.push(total / samples.len() as f64);
    }
    Ok((value, log))
}

/// Mean cross-entropy of the critic on a sample set.
pub fn value_loss(value: &ValueNet, samples: &[ValueSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(ValueError::EmptyDataset);
    }
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let out = value.net.forward_batch(&Matrix::from_rows(&inputs))?;
    let total: f64 = samples
        .iter()
        .enumerate()
        .map(|(r, s)| {
            SoftmaxCrossEntropy { target: s.bin }
                .loss_and_grad(out.row(r))
                .0
        })
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Bootstrapped N-step lookahead.
    NStep(usize),
    /// Return-to-go minus value.
    MonteCarlo,
}

/// Advantages of every action in one episode.
///
/// `values[t] = V(o_t)` and `returns[t] = R̂_t` for `t = 0..=T`; the result
/// has one entry per action (`T` entries). N-step lookahead that would run
/// past the terminal uses the actual return tail instead of bootstrapping.
pub fn advantages_from_values(values: &[f64], returns: &[f64], mode: AdvantageMode) -> Vec<f64> {
    let len = returns.len().saturating_sub(1);
    (0..len)
        .map(|t| match mode {
            AdvantageMode::MonteCarlo => returns[t] - values[t],
            AdvantageMode::NStep(n) => {
                if t + n >= len {
                    returns[t] - values[t]
                } else {
                    // Σ_{t..t+N−1} r̂ telescopes to R̂_t − R̂_{t+N}.
                    returns[t] - returns[t + n] + values[t + n] - values[t]
                }
            }
        })
        .collect()
}

/// Advantage of the action at step `t`.
pub fn advantage<V: ValueEstimator + ?Sized>(
    observations: &[Vec<f64>],
    returns: &[f64],
    task: TaskKind,
    value: &V,
    mode: AdvantageMode,
    t: usize,
) -> Result<f64> {
    let len = returns.len().saturating_sub(1);
    if t >= len || observations.len() < returns.len() {
        return Err(ValueError::StepOutOfRange { t, len });
    }
    let v_t = value.value(&observations[t], task);
    Ok(match mode {
        AdvantageMode::NStep(n) if t + n < len => {
            returns[t] - returns[t + n] + value.value(&observations[t + n], task) - v_t
        }
        _ => returns[t] - v_t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    pub sample_size: usize,
    /// Every sampled advantage is equal, so nothing lies strictly above ε.
    pub degenerate: bool,
}

/// Threshold such that about `fraction` of a seeded sample of `advantages`
/// lies strictly above it.
pub fn calibrate_threshold(
    advantages: &[f64],
    fraction: f64,
    task: TaskKind,
    seed: u64,
) -> Result<Calibration> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ValueError::BadFraction(fraction));
    }
    if advantages.len() < MIN_CALIBRATION_SAMPLES {
        return Err(ValueError::TooFewSamples {
            task,
            got: advantages.len(),
        });
    }
    let mut sample: Vec<f64> = if advantages.len() > CALIBRATION_CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, advantages.len(), CALIBRATION_CAP)
            .into_iter()
            .map(|i| advantages[i])
            .collect()
    } else {
        advantages.to_vec()
    };
    sample.sort_by(f64::total_cmp);
    let n = sample.len();
    let above = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let epsilon = sample[n - above - 1];
    let degenerate = sample[0] == sample[n - 1];
    if degenerate {
        log::warn!(
            "all {n} advantage samples for {task} are equal; no sample clears the threshold"
        );
    }
    Ok(Calibration {
        epsilon,
        sample_size: n,
        degenerate,
    })
}

/// Per-task improvement thresholds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub positive_fraction: f64,
    pub thresholds: BTreeMap<TaskKind, f64>,
}

impl ThresholdTable {
    pub fn new(positive_fraction: f64) -> Self {
        Self {
            positive_fraction,
            thresholds: BTreeMap::new(),
        }
    }

    pub fn get(&self, task: TaskKind) -> Option<f64> {
        self.thresholds.get(&task).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Positive,
    Negative,
    Absent,
}

impl Indicator {
    /// Numeric conditioning code fed to the policy.
    pub fn code(self) -> f64 {
        match self {
            Indicator::Positive => 1.0,
            Indicator::Negative => -1.0,
            Indicator::Absent => 0.0,
        }
    }
}

/// `1[A > ε]`, with forced steps always positive.
pub fn indicator(advantage: f64, epsilon: f64, forced: bool) -> Indicator {
    if forced || advantage > epsilon {
        Indicator::Positive
    } else {
        Indicator::Negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub t: usize,
    pub advantage: f64,
    pub indicator: Indicator,
    pub forced: bool,
}

impl AdvantageRecord {
    pub fn new(t: usize, advantage: f64, epsilon: f64, forced: bool) -> Self {
        Self {
            t,
            advantage,
            indicator: indicator(advantage, epsilon, forced),
            forced,
        }
    }
}
