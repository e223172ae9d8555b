//! Scripted intervention gate: a stand-in for an operator watching the
//! critic's value trace and the distance to failure.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Steps of value history the drop is measured over.
    pub window: usize,
    /// Drop in normalized value within the window that triggers takeover.
    pub drop_threshold: f64,
    /// Takeover when the agent gets closer than this to a failure region.
    pub failure_margin: f64,
    /// Release once value recovers to this fraction of the pre-drop value.
    pub recovery_factor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 10,
            drop_threshold: 0.15,
            failure_margin: 0.1,
            recovery_factor: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Continue,
    Intervene,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GatePhase {
    Monitoring,
    Intervening { pre_drop: f64 },
}

/// Stateless decision on a value trace.
///
/// While monitoring, intervene if the latest value sits more than
/// `drop_threshold` below the maximum of the last `window` values, or if
/// `failure_distance` is inside the margin. While intervening, release once
/// the latest value reaches [`recovery_level`] and the margin is respected.
pub fn gate_decide(
    trace: &[f64],
    failure_distance: f64,
    phase: GatePhase,
    config: &GateConfig,
) -> GateDecision {
    let Some(&current) = trace.last() else {
        return GateDecision::Continue;
    };
    match phase {
        GatePhase::Monitoring => {
            if failure_distance < config.failure_margin {
                return GateDecision::Intervene;
            }
            if window_peak(trace, config.window) - current > config.drop_threshold {
                return GateDecision::Intervene;
            }
            GateDecision::Continue
        }
        GatePhase::Intervening { pre_drop } => {
            if current >= recovery_level(pre_drop, config)
                && failure_distance >= config.failure_margin
            {
                GateDecision::Release
            } else {
                GateDecision::Continue
            }
        }
    }
}

/// Value level that ends an intervention.
///
/// For negative values `factor · pre_drop` lies above `pre_drop`, so the
/// expert has to bring the value back past where it was before the drop.
pub fn recovery_level(pre_drop: f64, config: &GateConfig) -> f64 {
    config.recovery_factor * pre_drop
}

fn window_peak(trace: &[f64], window: usize) -> f64 {
    let start = trace.len().saturating_sub(window.max(1));
    trace[start..]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Gate with its phase, fed one value per step.
#[derive(Debug, Clone)]
pub struct Gate {
    config: GateConfig,
    phase: GatePhase,
    trace: Vec<f64>,
}

impl Gate {
    pub fn new(config: GateConfig) -> Self {
        Self {
            config,
            phase: GatePhase::Monitoring,
            trace: Vec::new(),
        }
    }

    pub fn phase(&self) -> GatePhase {
        self.phase
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn is_intervening(&self) -> bool {
        matches!(self.phase, GatePhase::Intervening { .. })
    }

    /// Records the critic value for the current step and returns the decision.
    pub fn observe(&mut self, value: f64, failure_distance: f64) -> GateDecision {
        self.trace.push(value);
        let decision = gate_decide(&self.trace, failure_distance, self.phase, &self.config);
        match decision {
            GateDecision::Intervene => {
                let peak = window_peak(&self.trace[..self.trace.len() - 1], self.config.window);
                let pre_drop = if peak.is_finite() { peak } else { value };
                self.phase = GatePhase::Intervening { pre_drop };
            }
            GateDecision::Release => self.phase = GatePhase::Monitoring,
            GateDecision::Continue => {}
        }
        decision
    }
}
