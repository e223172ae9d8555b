//! Comparison objectives for policy extraction: advantage-weighted
//! regression and a trust-region policy-gradient variant with a quadratic
//! ratio penalty. Both train the unconditioned heads only.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::{
    fit, ActionTarget, ExampleTerms, FlowNoise, Objective, PolicyError, PolicyExample, PolicyInput,
    PolicyNet, PolicyTrainConfig, PolicyTrainLog, WeightedTerms,
};
use crate::value::Indicator;

/// Bound on `|log ρ|` before exponentiation.
pub const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("unknown baseline method {0:?}")]
    UnknownMethod(String),
    #[error("advantage count {advantages} does not match example count {examples}")]
    LengthMismatch { advantages: usize, examples: usize },
    #[error("invalid baseline parameter: {0}")]
    InvalidParameter(&'static str),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Awr,
    Spo,
}

impl FromStr for BaselineMethod {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awr" => Ok(Self::Awr),
            "spo" => Ok(Self::Spo),
            other => Err(BaselineError::UnknownMethod(other.to_string())),
        }
    }
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Awr => "awr",
            Self::Spo => "spo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwrConfig {
    pub beta: f64,
    pub max_weight: f64,
}

impl Default for AwrConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            max_weight: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpoConfig {
    pub epsilon_ar: f64,
    pub epsilon_flow: f64,
    /// Weight of the continuous-head term.
    pub alpha: f64,
}

impl Default for SpoConfig {
    fn default() -> Self {
        Self {
            epsilon_ar: 0.01,
            epsilon_flow: 0.01,
            alpha: 1.0,
        }
    }
}

/// `min(exp(A/β), w_max)`.
pub fn awr_weight(advantage: f64, config: &AwrConfig) -> f64 {
    (advantage / config.beta).exp().min(config.max_weight)
}

/// Weighted negative log-likelihood of `target` under the unconditioned heads.
pub fn awr_loss(
    policy: &PolicyNet,
    obs: &[f64],
    task: usize,
    target: &ActionTarget,
    noise: Option<&FlowNoise>,
    advantage: f64,
    config: &AwrConfig,
) -> Result<f64> {
    let input = PolicyInput::new(obs, task, Indicator::Absent);
    let terms = policy.example_terms(&[input], &[target], &[noise])?[0];
    Ok(awr_weight(advantage, config) * (terms.ce + terms.flow))
}

/// Current and reference likelihood terms of one head for one example.
///
/// `current` and `reference` are negative log-likelihood surrogates, so
/// `ρ = exp(scale · (reference − current))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRecord {
    pub current: f64,
    pub reference: f64,
    pub ratio: f64,
    pub advantage: f64,
}

impl RatioRecord {
    /// Categorical head: the terms are exact cross-entropies.
    pub fn discrete(current: f64, reference: f64, advantage: f64) -> Self {
        Self::with_scale(current, reference, advantage, 1.0)
    }

    /// Flow head: the terms are weighted flow losses, read as the exponent
    /// of a unit-variance Gaussian, hence the factor one half.
    pub fn continuous(current: f64, reference: f64, advantage: f64) -> Self {
        Self::with_scale(current, reference, advantage, 0.5)
    }

    fn with_scale(current: f64, reference: f64, advantage: f64, scale: f64) -> Self {
        let log_ratio = (scale * (reference - current)).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        Self {
            current,
            reference,
            ratio: log_ratio.exp(),
            advantage,
        }
    }

    fn clamped(&self, scale: f64) -> bool {
        (scale * (self.reference - self.current)).abs() >= MAX_LOG_RATIO
    }
}

/// `ρA − |A|/(2ε)·(ρ − 1)²`, the per-record quantity being maximized.
pub fn spo_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    ratio * advantage - advantage.abs() / (2.0 * epsilon) * (ratio - 1.0).powi(2)
}

/// Derivative of [`spo_objective`] with respect to the ratio.
pub fn spo_objective_slope(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    advantage - advantage.abs() * (ratio - 1.0) / epsilon
}

/// Negated sum of the categorical terms and `α` times the flow terms.
pub fn spo_loss(
    discrete: &[RatioRecord],
    continuous: &[RatioRecord],
    config: &SpoConfig,
) -> Result<f64> {
    if config.epsilon_ar <= 0.0 || config.epsilon_flow <= 0.0 {
        return Err(BaselineError::InvalidParameter(
            "trust-region widths must be positive",
        ));
    }
    let ar: f64 = discrete
        .iter()
        .map(|r| spo_objective(r.ratio, r.advantage, config.epsilon_ar))
        .sum();
    let flow: f64 = continuous
        .iter()
        .map(|r| spo_objective(r.ratio, r.advantage, config.epsilon_flow))
        .sum();
    Ok(-(ar + config.alpha * flow))
}

pub struct AwrObjective {
    weights: Vec<f64>,
}

impl AwrObjective {
    pub fn new(advantages: &[f64], config: &AwrConfig) -> Result<Self> {
        if config.beta <= 0.0 {
            return Err(BaselineError::InvalidParameter(
                "AWR temperature must be positive",
            ));
        }
        Ok(Self {
            weights: advantages.iter().map(|&a| awr_weight(a, config)).collect(),
        })
    }
}

impl Objective for AwrObjective {
    fn weigh(&self, example: usize, terms: ExampleTerms) -> WeightedTerms {
        let w = self.weights[example];
        WeightedTerms {
            loss: w * (terms.ce + terms.flow),
            d_ce: w,
            d_flow: w,
        }
    }
}

/// Trust-region objective whose reference terms are recomputed from the
/// policy at the start of every epoch, under that epoch's flow noise.
pub struct SpoObjective {
    advantages: Vec<f64>,
    targets: Vec<ActionTarget>,
    config: SpoConfig,
    reference: Vec<ExampleTerms>,
}

impl SpoObjective {
    pub fn new(examples: &[PolicyExample], advantages: &[f64], config: SpoConfig) -> Result<Self> {
        if config.epsilon_ar <= 0.0 || config.epsilon_flow <= 0.0 {
            return Err(BaselineError::InvalidParameter(
                "trust-region widths must be positive",
            ));
        }
        if examples.len() != advantages.len() {
            return Err(BaselineError::LengthMismatch {
                advantages: advantages.len(),
                examples: examples.len(),
            });
        }
        Ok(Self {
            advantages: advantages.to_vec(),
            targets: examples.iter().map(|e| e.target.clone()).collect(),
            config,
            reference: Vec::new(),
        })
    }

    /// Fix the reference terms directly instead of snapshotting a policy.
    pub fn set_reference(&mut self, reference: Vec<ExampleTerms>) {
        self.reference = reference;
    }

    pub fn records(
        &self,
        example: usize,
        terms: ExampleTerms,
    ) -> (RatioRecord, Option<RatioRecord>) {
        let a = self.advantages[example];
        let r = self.reference[example];
        let ar = RatioRecord::discrete(terms.ce, r.ce, a);
        let flow = matches!(self.targets[example], ActionTarget::Continuous(_))
            .then(|| RatioRecord::continuous(terms.flow, r.flow, a));
        (ar, flow)
    }
}

impl Objective for SpoObjective {
    fn begin_epoch(
        &mut self,
        policy: &PolicyNet,
        inputs: &[PolicyInput],
        noise: &[Option<FlowNoise>],
    ) -> std::result::Result<(), PolicyError> {
        let targets: Vec<&ActionTarget> = self.targets.iter().collect();
        let noise: Vec<Option<&FlowNoise>> = noise.iter().map(Option::as_ref).collect();
        self.reference = policy.example_terms(inputs, &targets, &noise)?;
        Ok(())
    }

    fn weigh(&self, example: usize, terms: ExampleTerms) -> WeightedTerms {
        let (ar, flow) = self.records(example, terms);
        let eps_ar = self.config.epsilon_ar;
        let mut loss = -spo_objective(ar.ratio, ar.advantage, eps_ar);
        // dρ/dce = −ρ; dρ/dflow = −ρ/2.
        let d_ce = if ar.clamped(1.0) {
            0.0
        } else {
            spo_objective_slope(ar.ratio, ar.advantage, eps_ar) * ar.ratio
        };
        let mut d_flow = 0.0;
        if let Some(f) = flow {
            let eps = self.config.epsilon_flow;
            loss -= self.config.alpha * spo_objective(f.ratio, f.advantage, eps);
            if !f.clamped(0.5) {
                d_flow = self.config.alpha
                    * 0.5
                    * spo_objective_slope(f.ratio, f.advantage, eps)
                    * f.ratio;
            }
        }
        WeightedTerms { loss, d_ce, d_flow }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub awr: AwrConfig,
    pub spo: SpoConfig,
    pub train: PolicyTrainConfig,
}

/// Trains the unconditioned heads of `init` with the chosen objective.
///
/// Indicators in `examples` are ignored: every example is fed with the
/// absent code and no dropout is applied.
pub fn train_baseline(
    init: &PolicyNet,
    examples: &[PolicyExample],
    advantages: &[f64],
    method: BaselineMethod,
    config: &BaselineConfig,
) -> Result<(PolicyNet, PolicyTrainLog)> {
    if examples.len() != advantages.len() {
        return Err(BaselineError::LengthMismatch {
            advantages: advantages.len(),
            examples: examples.len(),
        });
    }
    let unconditioned: Vec<PolicyExample> = examples
        .iter()
        .map(|e| PolicyExample {
            indicator: Some(Indicator::Absent),
            ..e.clone()
        })
        .collect();
    let train = PolicyTrainConfig {
        dropout: 0.0,
        ..config.train.clone()
    };
    let out = match method {
        BaselineMethod::Awr => fit(
            init,
            &unconditioned,
            &mut AwrObjective::new(advantages, &config.awr)?,
            &train,
        )?,
        BaselineMethod::Spo => {
            let mut objective = SpoObjective::new(&unconditioned, advantages, config.spo)?;
            fit(init, &unconditioned, &mut objective, &train)?
        }
    };
    Ok(out)
}
