//! Feedforward networks with explicit reverse-mode gradients.
//!
//! Parameters are stored as named f32 blocks (`layer{i}.weight`, `layer{i}.bias`);
//! every forward and backward pass runs in f64 so reductions accumulate in 64 bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{matmul, matmul_a_bt, matmul_at_b_acc, Matrix};
use super::{ApproxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let block = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(block.numel(), block.data.len());
        block
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Multi-layer perceptron. `activations[i]` is applied after layer `i`; the
/// last entry is usually [`Activation::Identity`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    blocks: Vec<ParamBlock>,
}

/// Gradient blocks aligned with a network's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            blocks: net.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

/// Activations recorded by a forward pass for use by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `values[0]` is the input batch; `values[i + 1]` is the output of layer `i`.
    values: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.values[0]
    }
}

/// A loss defined on one row of network output.
pub trait OutputLoss {
    /// Loss value and its gradient with respect to `output`.
    fn loss_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>);
}

impl Network {
    /// Builds a network with the given layer sizes. Hidden layers use
    /// `hidden`; the output layer uses `output`.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(ApproxError::InvalidArchitecture(format!(
                "layer sizes must be >= 2 positive entries, got {sizes:?}"
            )));
        }
        let n_layers = sizes.len() - 1;
        let mut activations = vec![hidden; n_layers];
        activations[n_layers - 1] = output;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(2 * n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            let b: Vec<f32> = (0..fan_out)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            blocks.push(ParamBlock::new(
                format!("layer{i}.weight"),
                vec![fan_out, fan_in],
                w,
            ));
            blocks.push(ParamBlock::new(format!("layer{i}.bias"), vec![fan_out], b));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activations,
            blocks,
        })
    }

    /// Reassembles a network from its architecture and parameter blocks.
    pub fn from_parts(
        sizes: Vec<usize>,
        activations: Vec<Activation>,
        blocks: Vec<ParamBlock>,
    ) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(ApproxError::InvalidArchitecture(format!(
                "{} sizes with {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        if blocks.len() != 2 * activations.len() {
            return Err(ApproxError::InvalidArchitecture(format!(
                "expected {} blocks, got {}",
                2 * activations.len(),
                blocks.len()
            )));
        }
        for i in 0..activations.len() {
            let w = &blocks[2 * i];
            let b = &blocks[2 * i + 1];
            if w.shape != [sizes[i + 1], sizes[i]] || b.shape != [sizes[i + 1]] {
                return Err(ApproxError::ShapeMismatch(format!(
                    "layer {i}: weight {:?}, bias {:?} for sizes {:?}",
                    w.shape, b.shape, sizes
                )));
            }
            if w.data.len() != w.numel() || b.data.len() != b.numel() {
                return Err(ApproxError::ShapeMismatch(format!(
                    "layer {i}: data length"
                )));
            }
        }
        Ok(Self {
            sizes,
            activations,
            blocks,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.data.iter().all(|x| x.is_finite()))
    }

    fn n_layers(&self) -> usize {
        self.activations.len()
    }

    fn weights_f64(&self, layer: usize) -> (Vec<f64>, Vec<f64>) {
        let w = self.blocks[2 * layer]
            .data
            .iter()
            .map(|&x| x as f64)
            .collect();
        let b = self.blocks[2 * layer + 1]
            .data
            .iter()
            .map(|&x| x as f64)
            .collect();
        (w, b)
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec());
        Ok(self.forward_batch(&x)?.into_vec())
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_tape(input.clone())?.values.pop().unwrap())
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn forward_tape(&self, input: Matrix) -> Result<Tape> {
        if input.cols() != self.input_dim() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let batch = input.rows();
        let mut values = Vec::with_capacity(self.n_layers() + 1);
        values.push(input);
        for layer in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let (w, b) = self.weights_f64(layer);
            let mut out = Matrix::zeros(batch, fan_out);
            matmul_a_bt(
                values[layer].data(),
                &w,
                batch,
                fan_in,
                fan_out,
                out.data_mut(),
            );
            let act = self.activations[layer];
            for r in 0..batch {
                for (y, bias) in out.row_mut(r).iter_mut().zip(&b) {
                    *y = act.apply(*y + bias);
                }
            }
            values.push(out);
        }
        Ok(Tape { values })
    }

    /// Backpropagates `d_output` (gradient of the loss w.r.t. the network
    /// output, one row per batch element) through a recorded tape.
    /// Returns parameter gradients (summed over the batch) and the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &Tape, d_output: &Matrix) -> Result<(Gradients, Matrix)> {
        let batch = tape.input().rows();
        if d_output.rows() != batch || d_output.cols() != self.output_dim() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.output_dim(),
                got: d_output.cols(),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = d_output.clone();
        for layer in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let act = self.activations[layer];
            let out = &tape.values[layer + 1];
            for (d, y) in delta.data_mut().iter_mut().zip(out.data()) {
                *d *= act.derivative_from_output(*y);
            }
            let x = &tape.values[layer];
            matmul_at_b_acc(
                delta.data(),
                x.data(),
                batch,
                fan_out,
                fan_in,
                &mut grads.blocks[2 * layer],
            );
            let gb = &mut grads.blocks[2 * layer + 1];
            for r in 0..batch {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            let (w, _) = self.weights_f64(layer);
            let mut d_in = Matrix::zeros(batch, fan_in);
            matmul(delta.data(), &w, batch, fan_out, fan_in, d_in.data_mut());
            delta = d_in;
        }
        Ok((grads, delta))
    }

    /// Mean loss over a batch of `(input, loss)` pairs and its gradients.
    pub fn loss_and_gradients<L: OutputLoss>(
        &self,
        batch: &[(Vec<f64>, L)],
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(ApproxError::EmptyBatch);
        }
        let rows: Vec<&[f64]> = batch.iter().map(|(x, _)| x.as_slice()).collect();
        for r in &rows {
            if r.len() != self.input_dim() {
                return Err(ApproxError::DimensionMismatch {
                    expected: self.input_dim(),
                    got: r.len(),
                });
            }
        }
        let tape = self.forward_tape(Matrix::from_rows(&rows))?;
        let out = tape.output();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut d_out = Matrix::zeros(batch.len(), self.output_dim());
        for (i, (_, loss)) in batch.iter().enumerate() {
            let (l, g) = loss.loss_and_grad(out.row(i));
            total += l;
            for (d, gi) in d_out.row_mut(i).iter_mut().zip(g) {
                *d = gi * scale;
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(ApproxError::NumericFailure {
                block: "loss".into(),
            });
        }
        let (grads, _) = self.backward(&tape, &d_out)?;
        check_finite(self, &grads)?;
        Ok((loss, grads))
    }
}

/// Fails with the name of the first block containing a non-finite gradient.
pub fn check_finite(net: &Network, grads: &Gradients) -> Result<()> {
    for (block, g) in net.blocks.iter().zip(&grads.blocks) {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ApproxError::NumericFailure {
                block: block.name.clone(),
            });
        }
    }
    Ok(())
}

/// Softmax of a logit slice, computed stably.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[target]`.
pub fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[target] - lse
}

/// Softmax cross-entropy against a class index.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxCrossEntropy {
    pub target: usize,
}

impl OutputLoss for SoftmaxCrossEntropy {
    fn loss_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        let mut p = softmax(output);
        let loss = -log_softmax_at(output, self.target);
        p[self.target] -= 1.0;
        (loss, p)
    }
}

/// Plain squared error `‖output − target‖²`.
#[derive(Debug, Clone)]
pub struct SquaredError {
    pub target: Vec<f64>,
}

impl OutputLoss for SquaredError {
    fn loss_and_grad(&self, output: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = output
            .iter()
            .zip(&self.target)
            .map(|(o, t)| o - t)
            .collect();
        let loss = diff.iter().map(|d| d * d).sum();
        (loss, diff.into_iter().map(|d| 2.0 * d).collect())
    }
}
