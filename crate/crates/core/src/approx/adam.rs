use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::{ApproxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment accumulators shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f32>> = net
            .blocks()
            .iter()
            .map(|b| vec![0.0; b.data.len()])
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    fn check_shapes(&self, net: &Network, grads: &Gradients) -> Result<()> {
        let blocks = net.blocks();
        if grads.blocks.len() != blocks.len()
            || self.first_moment.len() != blocks.len()
            || self.second_moment.len() != blocks.len()
        {
            return Err(ApproxError::ShapeMismatch(format!(
                "{} parameter blocks, {} gradient blocks, {} moment blocks",
                blocks.len(),
                grads.blocks.len(),
                self.first_moment.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let n = b.data.len();
            if grads.blocks[i].len() != n
                || self.first_moment[i].len() != n
                || self.second_moment[i].len() != n
            {
                return Err(ApproxError::ShapeMismatch(format!(
                    "block {} has {n} parameters",
                    b.name
                )));
            }
        }
        Ok(())
    }

    /// One bias-corrected adaptive-moment update of `net` in place.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        self.check_shapes(net, grads)?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, block) in net.blocks_mut().iter_mut().enumerate() {
            let g = &grads.blocks[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..block.data.len() {
                let gj = g[j];
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                block.data[j] = (block.data[j] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn optimizer_step(
    net: &Network,
    grads: &Gradients,
    state: &OptimizerState,
) -> Result<(Network, OptimizerState)> {
    let mut net = net.clone();
    let mut state = state.clone();
    state.step(&mut net, grads)?;
    Ok((net, state))
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}
