//! Advantage-conditioned policy: a shared trunk feeding a categorical head
//! and a flow-matching head over action chunks.
//!
//! The trunk sees `observation ++ task one-hot ++ indicator code`. The
//! categorical head emits the native discrete actions followed by one group
//! of [`PolicyDims::bins`] logits per chunk coordinate. The flow head sees
//! `trunk features ++ interpolant ++ η` and predicts the velocity `ω − a`.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approx::{
    clip_global_norm, log_softmax_at, softmax, Activation, AdamConfig, ApproxError, Checkpoint,
    Gradients, Matrix, Network, OptimizerState, ParamBlock, Parameterized,
};
use crate::envs::{pointmass, ActionChunk, TaskKind, GRID_ACTIONS, OBS_DIM};
use crate::value::Indicator;

pub const ACTION_BINS: usize = 15;
/// Fraction of training examples whose indicator is replaced by `Absent`.
pub const INDICATOR_DROPOUT: f64 = 0.3;
pub const DEFAULT_FLOW_STEPS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error("training example {0} has no indicator")]
    MissingIndicator(usize),
    #[error("empty training set")]
    EmptyDataset,
    #[error("task index {task} does not use the {expected} head")]
    WrongHead { task: usize, expected: &'static str },
    #[error("invalid policy layout: {0}")]
    InvalidDims(String),
    #[error("guidance weight {0} below 1")]
    BadGuidance(f64),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Discrete,
    Flow,
}

/// Shape of the policy's inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    /// Head used by each task index; its length is the one-hot width.
    pub task_heads: Vec<HeadKind>,
    pub discrete_actions: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub bins: usize,
}

impl PolicyDims {
    /// Layout shared by the three simulated tasks.
    pub fn tasks() -> Self {
        Self {
            obs_dim: OBS_DIM,
            task_heads: TaskKind::ALL
                .iter()
                .map(|t| match t {
                    TaskKind::GridFold => HeadKind::Discrete,
                    _ => HeadKind::Flow,
                })
                .collect(),
            discrete_actions: GRID_ACTIONS,
            horizon: pointmass::HORIZON,
            action_dim: pointmass::ACTION_DIM,
            bins: ACTION_BINS,
        }
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.task_heads.len() + 1
    }

    pub fn logits(&self) -> usize {
        self.discrete_actions + self.chunk_dim() * self.bins
    }

    fn validate(&self) -> Result<()> {
        if self.task_heads.is_empty() || self.logits() == 0 {
            return Err(PolicyError::InvalidDims(
                "needs at least one task and one logit".into(),
            ));
        }
        if self.task_heads.contains(&HeadKind::Flow) && (self.chunk_dim() == 0 || self.bins < 2) {
            return Err(PolicyError::InvalidDims(
                "flow tasks need a chunk and >= 2 bins".into(),
            ));
        }
        if self.task_heads.contains(&HeadKind::Discrete) && self.discrete_actions == 0 {
            return Err(PolicyError::InvalidDims(
                "discrete tasks need actions".into(),
            ));
        }
        Ok(())
    }

    fn to_block(&self) -> ParamBlock {
        let mut data = vec![
            self.obs_dim as f32,
            self.discrete_actions as f32,
            self.horizon as f32,
            self.action_dim as f32,
            self.bins as f32,
        ];
        data.extend(self.task_heads.iter().map(|h| match h {
            HeadKind::Discrete => 0.0,
            HeadKind::Flow => 1.0,
        }));
        ParamBlock::new("policy.dims", vec![data.len()], data)
    }

    fn from_block(block: &ParamBlock) -> Result<Self> {
        let d = &block.data;
        if d.len() < 6 {
            return Err(ApproxError::Format("policy.dims block too short".into()).into());
        }
        Ok(Self {
            obs_dim: d[0] as usize,
            discrete_actions: d[1] as usize,
            horizon: d[2] as usize,
            action_dim: d[3] as usize,
            bins: d[4] as usize,
            task_heads: d[5..]
                .iter()
                .map(|&x| {
                    if x == 0.0 {
                        HeadKind::Discrete
                    } else {
                        HeadKind::Flow
                    }
                })
                .collect(),
        })
    }
}

/// Bin index of a command in [−1, 1].
pub fn action_bin(x: f64, bins: usize) -> usize {
    let last = (bins - 1) as f64;
    (((x.clamp(-1.0, 1.0) + 1.0) / 2.0 * last).round() as usize).min(bins - 1)
}

pub fn bin_center(bin: usize, bins: usize) -> f64 {
    -1.0 + 2.0 * bin as f64 / (bins - 1) as f64
}

/// `η·a + (1 − η)·ω`.
pub fn interpolant(action: &[f64], omega: &[f64], eta: f64) -> Vec<f64> {
    action
        .iter()
        .zip(omega)
        .map(|(a, w)| eta * a + (1.0 - eta) * w)
        .collect()
}

/// Flow-loss weight `e^{−η/2}`.
pub fn flow_weight(eta: f64) -> f64 {
    (-eta / 2.0).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInput {
    pub obs: Vec<f64>,
    pub task: usize,
    pub indicator: Indicator,
}

impl PolicyInput {
    pub fn new(obs: &[f64], task: usize, indicator: Indicator) -> Self {
        Self {
            obs: obs.to_vec(),
            task,
            indicator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTarget {
    Discrete(usize),
    /// Flattened chunk, row-major `horizon × action_dim`.
    Continuous(Vec<f64>),
}

impl ActionTarget {
    pub fn from_chunk(chunk: &ActionChunk) -> Self {
        match chunk {
            ActionChunk::Discrete(a) => ActionTarget::Discrete(*a),
            ActionChunk::Continuous { commands, .. } => ActionTarget::Continuous(commands.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyExample {
    pub obs: Vec<f64>,
    pub task: usize,
    pub indicator: Option<Indicator>,
    pub target: ActionTarget,
}

/// Flow time and noise drawn for one continuous example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNoise {
    pub eta: f64,
    pub omega: Vec<f64>,
}

impl FlowNoise {
    pub fn draw<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let eta = rng.random::<f64>();
        let omega = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { eta, omega }
    }
}

/// Per-example likelihood terms: summed categorical cross-entropy and the
/// weighted flow loss (zero for discrete tasks).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExampleTerms {
    pub ce: f64,
    pub flow: f64,
}

/// Per-example objective value and its sensitivities to the two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedTerms {
    pub loss: f64,
    pub d_ce: f64,
    pub d_flow: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyGradients {
    pub trunk: Gradients,
    pub discrete: Gradients,
    pub flow: Option<Gradients>,
}

impl PolicyGradients {
    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut out: Vec<&Vec<f64>> = self.trunk.blocks.iter().collect();
        out.extend(self.discrete.blocks.iter());
        if let Some(f) = &self.flow {
            out.extend(f.blocks.iter());
        }
        out
    }

    fn all_mut(&mut self) -> Vec<&mut Gradients> {
        let mut v = vec![&mut self.trunk, &mut self.discrete];
        if let Some(f) = self.flow.as_mut() {
            v.push(f);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyArch {
    pub trunk: Vec<usize>,
    pub flow_hidden: Vec<usize>,
}

impl Default for PolicyArch {
    fn default() -> Self {
        Self {
            trunk: vec![128, 128],
            flow_hidden: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    dims: PolicyDims,
    trunk: Network,
    discrete: Network,
    flow: Option<Network>,
}

struct Forward {
    trunk: crate::approx::Tape,
    discrete: crate::approx::Tape,
    flow: Option<crate::approx::Tape>,
    /// Batch rows that went through the flow head, in order.
    flow_rows: Vec<usize>,
}

impl PolicyNet {
    pub fn new(dims: PolicyDims, arch: &PolicyArch, seed: u64) -> Result<Self> {
        dims.validate()?;
        if arch.trunk.is_empty() {
            return Err(PolicyError::InvalidDims(
                "trunk needs a hidden layer".into(),
            ));
        }
        let mut trunk_sizes = vec![dims.input_dim()];
        trunk_sizes.extend_from_slice(&arch.trunk);
        let width = *arch.trunk.last().unwrap();
        let trunk = Network::new(&trunk_sizes, Activation::Tanh, Activation::Tanh, seed)?;
        let discrete = Network::new(
            &[width, dims.logits()],
            Activation::Tanh,
            Activation::Identity,
            seed.wrapping_add(1),
        )?;
        let flow = if dims.task_heads.contains(&HeadKind::Flow) {
            let mut sizes = vec![width + dims.chunk_dim() + 1];
            sizes.extend_from_slice(&arch.flow_hidden);
            sizes.push(dims.chunk_dim());
            Some(Network::new(
                &sizes,
                Activation::Tanh,
                Activation::Identity,
                seed.wrapping_add(2),
            )?)
        } else {
            None
        };
        Ok(Self {
            dims,
            trunk,
            discrete,
            flow,
        })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn trunk(&self) -> &Network {
        &self.trunk
    }

    pub fn discrete_head(&self) -> &Network {
        &self.discrete
    }

    pub fn flow_head(&self) -> Option<&Network> {
        self.flow.as_ref()
    }

    pub fn flow_head_mut(&mut self) -> Option<&mut Network> {
        self.flow.as_mut()
    }

    pub fn discrete_head_mut(&mut self) -> &mut Network {
        &mut self.discrete
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.discrete.param_count()
            + self.flow.as_ref().map_or(0, |f| f.param_count())
    }

    fn head(&self, task: usize) -> HeadKind {
        self.dims.task_heads[task]
    }

    /// Trunk input row for `(obs, task, indicator code)`.
    pub fn input_row(&self, obs: &[f64], task: usize, code: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dims.input_dim());
        x.extend_from_slice(obs);
        x.resize(self.dims.obs_dim, 0.0);
        for i in 0..self.dims.task_heads.len() {
            x.push(if i == task { 1.0 } else { 0.0 });
        }
        x.push(code);
        x
    }

    fn flow_row(features: &[f64], point: &[f64], eta: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(features.len() + point.len() + 1);
        row.extend_from_slice(features);
        row.extend_from_slice(point);
        row.push(eta);
        row
    }

    fn run(
        &self,
        rows: &[Vec<f64>],
        targets: &[&ActionTarget],
        noise: &[Option<&FlowNoise>],
    ) -> Result<Forward> {
        let trunk = self.trunk.forward_tape(Matrix::from_rows(rows))?;
        let discrete = self.discrete.forward_tape(trunk.output().clone())?;
        let mut flow_rows = Vec::new();
        let mut flow_inputs = Vec::new();
        for (i, target) in targets.iter().enumerate() {
            if let (ActionTarget::Continuous(a), Some(n)) = (target, noise[i]) {
                flow_rows.push(i);
                let point = interpolant(a, &n.omega, n.eta);
                flow_inputs.push(Self::flow_row(trunk.output().row(i), &point, n.eta));
            }
        }
        let flow = match (&self.flow, flow_inputs.is_empty()) {
            (Some(head), false) => Some(head.forward_tape(Matrix::from_rows(&flow_inputs))?),
            _ => None,
        };
        Ok(Forward {
            trunk,
            discrete,
            flow,
            flow_rows,
        })
    }

    /// Categorical cross-entropy for row `i` and the gradient on its logits.
    fn ce_and_grad(&self, logits: &[f64], target: &ActionTarget) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; logits.len()];
        let mut ce = 0.0;
        match target {
            ActionTarget::Discrete(a) => {
                let n = self.dims.discrete_actions;
                if *a >= n {
                    return Err(PolicyError::InvalidDims(format!("action {a} out of {n}")));
                }
                let l = &logits[..n];
                ce -= log_softmax_at(l, *a);
                let p = softmax(l);
                grad[..n].copy_from_slice(&p);
                grad[*a] -= 1.0;
            }
            ActionTarget::Continuous(chunk) => {
                if chunk.len() != self.dims.chunk_dim() {
                    return Err(PolicyError::InvalidDims(format!(
                        "chunk of {} values, expected {}",
                        chunk.len(),
                        self.dims.chunk_dim()
                    )));
                }
                let bins = self.dims.bins;
                for (g, &x) in chunk.iter().enumerate() {
                    let start = self.dims.discrete_actions + g * bins;
                    let l = &logits[start..start + bins];
                    let b = action_bin(x, bins);
                    ce -= log_softmax_at(l, b);
                    let p = softmax(l);
                    grad[start..start + bins].copy_from_slice(&p);
                    grad[start + b] -= 1.0;
                }
            }
        }
        Ok((ce, grad))
    }

    /// Likelihood terms for each example under the given codes and noise.
    pub fn example_terms(
        &self,
        inputs: &[PolicyInput],
        targets: &[&ActionTarget],
        noise: &[Option<&FlowNoise>],
    ) -> Result<Vec<ExampleTerms>> {
        let rows: Vec<Vec<f64>> = inputs
            .iter()
            .map(|p| self.input_row(&p.obs, p.task, p.indicator.code()))
            .collect();
        let fwd = self.run(&rows, targets, noise)?;
        let mut terms = Vec::with_capacity(inputs.len());
        for (i, target) in targets.iter().enumerate() {
            let (ce, _) = self.ce_and_grad(fwd.discrete.output().row(i), target)?;
            terms.push(ExampleTerms { ce, flow: 0.0 });
        }
        if let Some(flow) = &fwd.flow {
            for (j, &i) in fwd.flow_rows.iter().enumerate() {
                let (ActionTarget::Continuous(a), Some(n)) = (targets[i], noise[i]) else {
                    unreachable!()
                };
                terms[i].flow = flow_term(flow.output().row(j), a, n).0;
            }
        }
        Ok(terms)
    }

    /// Mean objective over a batch and its gradients. `objective` maps each
    /// example's likelihood terms to its loss and sensitivities.
    pub fn loss_and_gradients<F>(
        &self,
        inputs: &[PolicyInput],
        targets: &[&ActionTarget],
        noise: &[Option<&FlowNoise>],
        mut objective: F,
    ) -> Result<(f64, PolicyGradients)>
    where
        F: FnMut(usize, ExampleTerms) -> WeightedTerms,
    {
        let b = inputs.len();
        if b == 0 {
            return Err(PolicyError::EmptyDataset);
        }
        let rows: Vec<Vec<f64>> = inputs
            .iter()
            .map(|p| self.input_row(&p.obs, p.task, p.indicator.code()))
            .collect();
        let fwd = self.run(&rows, targets, noise)?;
        let scale = 1.0 / b as f64;

        let mut ce_grads = Vec::with_capacity(b);
        let mut terms = vec![ExampleTerms::default(); b];
        for (i, target) in targets.iter().enumerate() {
            let (ce, g) = self.ce_and_grad(fwd.discrete.output().row(i), target)?;
            terms[i].ce = ce;
            ce_grads.push(g);
        }
        let mut flow_grads = Vec::with_capacity(fwd.flow_rows.len());
        if let Some(flow) = &fwd.flow {
            for (j, &i) in fwd.flow_rows.iter().enumerate() {
                let (ActionTarget::Continuous(a), Some(n)) = (targets[i], noise[i]) else {
                    unreachable!()
                };
                let (fl, g) = flow_term(flow.output().row(j), a, n);
                terms[i].flow = fl;
                flow_grads.push(g);
            }
        }

        let mut total = 0.0;
        let mut d_logits = Matrix::zeros(b, self.dims.logits());
        let mut d_flow_out = Matrix::zeros(fwd.flow_rows.len(), self.dims.chunk_dim());
        let mut flow_slot = 0;
        for i in 0..b {
            let w = objective(i, terms[i]);
            total += w.loss;
            for (d, g) in d_logits.row_mut(i).iter_mut().zip(&ce_grads[i]) {
                *d = w.d_ce * g * scale;
            }
            if fwd.flow_rows.get(flow_slot) == Some(&i) {
                for (d, g) in d_flow_out
                    .row_mut(flow_slot)
                    .iter_mut()
                    .zip(&flow_grads[flow_slot])
                {
                    *d = w.d_flow * g * scale;
                }
                flow_slot += 1;
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(ApproxError::NumericFailure {
                block: "policy loss".into(),
            }
            .into());
        }

        let (discrete_grads, mut d_features) = self.discrete.backward(&fwd.discrete, &d_logits)?;
        let flow_grads = match (&self.flow, &fwd.flow) {
            (Some(head), Some(tape)) => {
                let (g, d_in) = head.backward(tape, &d_flow_out)?;
                let width = d_features.cols();
                for (j, &i) in fwd.flow_rows.iter().enumerate() {
                    for (d, x) in d_features.row_mut(i).iter_mut().zip(&d_in.row(j)[..width]) {
                        *d += x;
                    }
                }
                Some(g)
            }
            (Some(head), None) => Some(Gradients::zeros_like(head)),
            _ => None,
        };
        let (trunk_grads, _) = self.trunk.backward(&fwd.trunk, &d_features)?;
        let grads = PolicyGradients {
            trunk: trunk_grads,
            discrete: discrete_grads,
            flow: flow_grads,
        };
        for (name, g) in [("trunk", &grads.trunk), ("discrete head", &grads.discrete)]
            .into_iter()
            .chain(grads.flow.as_ref().map(|g| ("flow head", g)))
        {
            if g.blocks.iter().flatten().any(|x| !x.is_finite()) {
                return Err(ApproxError::NumericFailure { block: name.into() }.into());
            }
        }
        Ok((loss, grads))
    }

    fn features(&self, input: &PolicyInput) -> Vec<f64> {
        let row = self.input_row(&input.obs, input.task, input.indicator.code());
        self.trunk.forward(&row).expect("trunk input width")
    }

    fn velocity(&self, features: &[f64], point: &[f64], eta: f64) -> Vec<f64> {
        let head = self.flow.as_ref().expect("flow head present");
        head.forward(&Self::flow_row(features, point, eta))
            .expect("flow input width")
    }

    /// Logits of the native discrete actions.
    pub fn discrete_logits(&self, input: &PolicyInput) -> Vec<f64> {
        let logits = self
            .discrete
            .forward(&self.features(input))
            .expect("head width");
        logits[..self.dims.discrete_actions].to_vec()
    }

    pub fn discrete_probs(&self, input: &PolicyInput) -> Vec<f64> {
        softmax(&self.discrete_logits(input))
    }

    /// Euler integration of `da/dη = −f(a, η)` from noise at η = 0 to η = 1.
    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        input: &PolicyInput,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.expect_head(input.task, HeadKind::Flow)?;
        let features = self.features(input);
        let omega = FlowNoise::draw(self.dims.chunk_dim(), rng).omega;
        Ok(self.integrate(omega, steps, |a, eta| self.velocity(&features, a, eta)))
    }

    fn integrate<F: Fn(&[f64], f64) -> Vec<f64>>(
        &self,
        mut a: Vec<f64>,
        steps: usize,
        field: F,
    ) -> Vec<f64> {
        let steps = steps.max(1);
        let dt = 1.0 / steps as f64;
        for k in 0..steps {
            let v = field(&a, k as f64 * dt);
            for (x, f) in a.iter_mut().zip(&v) {
                *x -= dt * f;
            }
        }
        a
    }

    fn expect_head(&self, task: usize, kind: HeadKind) -> Result<()> {
        if self.dims.task_heads.get(task) != Some(&kind) {
            return Err(PolicyError::WrongHead {
                task,
                expected: match kind {
                    HeadKind::Discrete => "discrete",
                    HeadKind::Flow => "flow",
                },
            });
        }
        Ok(())
    }

    pub fn sample_discrete<R: Rng + ?Sized>(
        &self,
        input: &PolicyInput,
        rng: &mut R,
    ) -> Result<usize> {
        self.expect_head(input.task, HeadKind::Discrete)?;
        Ok(sample_categorical(&self.discrete_probs(input), rng))
    }

    /// One action chunk for `input`, using the head its task is trained on.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        input: &PolicyInput,
        steps: usize,
        rng: &mut R,
    ) -> Result<ActionChunk> {
        match self.head(input.task) {
            HeadKind::Discrete => Ok(ActionChunk::Discrete(self.sample_discrete(input, rng)?)),
            HeadKind::Flow => {
                let a = self.sample_chunk(input, steps, rng)?;
                Ok(ActionChunk::continuous(
                    self.dims.horizon,
                    self.dims.action_dim,
                    a,
                ))
            }
        }
    }

    /// Seeded form of [`PolicyNet::sample_actions`].
    pub fn sample_actions_seeded(
        &self,
        input: &PolicyInput,
        steps: usize,
        seed: u64,
    ) -> Result<ActionChunk> {
        self.sample_actions(input, steps, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Guided sampling with `v_u + β(v_c − v_u)` between the positive and
    /// absent indicators. At β = 1 the conditional field is used as is.
    pub fn sample_actions_cfg<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        task: usize,
        beta: f64,
        steps: usize,
        rng: &mut R,
    ) -> Result<ActionChunk> {
        if !(beta >= 1.0) {
            return Err(PolicyError::BadGuidance(beta));
        }
        let cond = PolicyInput::new(obs, task, Indicator::Positive);
        if beta == 1.0 {
            return self.sample_actions(&cond, steps, rng);
        }
        let uncond = PolicyInput::new(obs, task, Indicator::Absent);
        match self.head(task) {
            HeadKind::Discrete => {
                let lc = self.discrete_logits(&cond);
                let lu = self.discrete_logits(&uncond);
                let guided: Vec<f64> = lc
                    .iter()
                    .zip(&lu)
                    .map(|(c, u)| u + beta * (c - u))
                    .collect();
                Ok(ActionChunk::Discrete(sample_categorical(
                    &softmax(&guided),
                    rng,
                )))
            }
            HeadKind::Flow => {
                let fc = self.features(&cond);
                let fu = self.features(&uncond);
                let omega = FlowNoise::draw(self.dims.chunk_dim(), rng).omega;
                let a = self.integrate(omega, steps, |a, eta| {
                    let vc = self.velocity(&fc, a, eta);
                    let vu = self.velocity(&fu, a, eta);
                    vc.iter()
                        .zip(&vu)
                        .map(|(c, u)| u + beta * (c - u))
                        .collect()
                });
                Ok(ActionChunk::continuous(
                    self.dims.horizon,
                    self.dims.action_dim,
                    a,
                ))
            }
        }
    }

    pub fn push_to(&self, ckpt: &mut Checkpoint) {
        ckpt.blocks.push(self.dims.to_block());
        ckpt.push_network("policy.trunk.", &self.trunk);
        ckpt.push_network("policy.discrete.", &self.discrete);
        if let Some(f) = &self.flow {
            ckpt.push_network("policy.flow.", f);
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dims = PolicyDims::from_block(ckpt.block("policy.dims")?)?;
        dims.validate()?;
        let flow = if dims.task_heads.contains(&HeadKind::Flow) {
            Some(ckpt.network("policy.flow.")?)
        } else {
            None
        };
        Ok(Self {
            trunk: ckpt.network("policy.trunk.")?,
            discrete: ckpt.network("policy.discrete.")?,
            flow,
            dims,
        })
    }
}

impl Parameterized for PolicyNet {
    fn param_blocks(&self) -> Vec<&ParamBlock> {
        let mut v: Vec<&ParamBlock> = self.trunk.blocks().iter().collect();
        v.extend(self.discrete.blocks().iter());
        if let Some(f) = &self.flow {
            v.extend(f.blocks().iter());
        }
        v
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut v: Vec<&mut ParamBlock> = self.trunk.blocks_mut().iter_mut().collect();
        v.extend(self.discrete.blocks_mut().iter_mut());
        if let Some(f) = self.flow.as_mut() {
            v.extend(f.blocks_mut().iter_mut());
        }
        v
    }
}

/// `w(η)·‖ω − a − f‖²` and its gradient with respect to `f`.
fn flow_term(f: &[f64], action: &[f64], noise: &FlowNoise) -> (f64, Vec<f64>) {
    let w = flow_weight(noise.eta);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(f.len());
    for ((fi, a), o) in f.iter().zip(action).zip(&noise.omega) {
        let r = o - a - fi;
        loss += r * r;
        grad.push(-2.0 * w * r);
    }
    (w * loss, grad)
}

/// Flow-matching loss for one example.
pub fn flow_loss(
    policy: &PolicyNet,
    input: &PolicyInput,
    action: &[f64],
    noise: &FlowNoise,
) -> Result<f64> {
    policy.expect_head(input.task, HeadKind::Flow)?;
    let target = ActionTarget::Continuous(action.to_vec());
    Ok(policy.example_terms(std::slice::from_ref(input), &[&target], &[Some(noise)])?[0].flow)
}

/// Summed categorical cross-entropy for one example.
pub fn discrete_loss(
    policy: &PolicyNet,
    input: &PolicyInput,
    target: &ActionTarget,
) -> Result<f64> {
    Ok(policy.example_terms(std::slice::from_ref(input), &[target], &[None])?[0].ce)
}

/// Reference distribution restricted to actions whose advantage clears
/// `epsilon` and renormalized; the reference itself when none does.
pub fn conditioned_distribution(reference: &[f64], advantages: &[f64], epsilon: f64) -> Vec<f64> {
    let kept: Vec<f64> = reference
        .iter()
        .zip(advantages)
        .map(|(&p, &a)| if a > epsilon { p } else { 0.0 })
        .collect();
    let mass: f64 = kept.iter().sum();
    if mass > 0.0 {
        kept.into_iter().map(|p| p / mass).collect()
    } else {
        reference.to_vec()
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(probs)
        .map(|d| d.sample(rng))
        .unwrap_or(0)
}

/// Adaptive-moment state for every part of a policy.
#[derive(Debug, Clone)]
pub struct PolicyOptimizer {
    trunk: OptimizerState,
    discrete: OptimizerState,
    flow: Option<OptimizerState>,
}

impl PolicyOptimizer {
    pub fn new(policy: &PolicyNet, config: AdamConfig) -> Self {
        Self {
            trunk: OptimizerState::new(&policy.trunk, config),
            discrete: OptimizerState::new(&policy.discrete, config),
            flow: policy.flow.as_ref().map(|f| OptimizerState::new(f, config)),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.trunk.config.lr = lr;
        self.discrete.config.lr = lr;
        if let Some(f) = self.flow.as_mut() {
            f.config.lr = lr;
        }
    }

    pub fn step(&mut self, policy: &mut PolicyNet, grads: &PolicyGradients) -> Result<()> {
        self.trunk.step(&mut policy.trunk, &grads.trunk)?;
        self.discrete.step(&mut policy.discrete, &grads.discrete)?;
        if let (Some(state), Some(net), Some(g)) = (
            self.flow.as_mut(),
            policy.flow.as_mut(),
            grads.flow.as_ref(),
        ) {
            state.step(net, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate down to `lr · final_lr_fraction`.
    pub final_lr_fraction: Option<f64>,
    /// Probability of replacing an example's indicator by `Absent`.
    pub dropout: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            final_lr_fraction: None,
            dropout: INDICATOR_DROPOUT,
            max_grad_norm: Some(10.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PolicyTrainLog {
    pub epoch_losses: Vec<f64>,
    /// Examples fed with the `Absent` code after dropout, per epoch.
    pub absent_per_epoch: Vec<usize>,
    pub examples_per_epoch: usize,
}

/// Training objective over per-example likelihood terms.
pub trait Objective {
    /// Called once per epoch with the noise that epoch will use.
    fn begin_epoch(
        &mut self,
        _policy: &PolicyNet,
        _inputs: &[PolicyInput],
        _noise: &[Option<FlowNoise>],
    ) -> Result<()> {
        Ok(())
    }

    fn weigh(&self, example: usize, terms: ExampleTerms) -> WeightedTerms;
}

/// Plain negative log-likelihood: categorical terms plus the flow loss.
pub struct LikelihoodObjective;

impl Objective for LikelihoodObjective {
    fn weigh(&self, _example: usize, terms: ExampleTerms) -> WeightedTerms {
        WeightedTerms {
            loss: terms.ce + terms.flow,
            d_ce: 1.0,
            d_flow: 1.0,
        }
    }
}

/// Minibatch training of `init` on `examples` under `objective`.
///
/// Every epoch draws, per example and in order, the dropout coin and then
/// the flow time and noise, from one stream seeded by `config.seed`.
pub fn fit<O: Objective>(
    init: &PolicyNet,
    examples: &[PolicyExample],
    objective: &mut O,
    config: &PolicyTrainConfig,
) -> Result<(PolicyNet, PolicyTrainLog)> {
    if examples.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut indicators = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        indicators.push(e.indicator.ok_or(PolicyError::MissingIndicator(i))?);
    }
    let mut policy = init.clone();
    let mut opt = PolicyOptimizer::new(&policy, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let chunk_dim = policy.dims.chunk_dim();
    let mut log = PolicyTrainLog {
        examples_per_epoch: examples.len(),
        ..Default::default()
    };
    for epoch in 0..config.epochs {
        if let Some(floor) = config.final_lr_fraction {
            let progress = epoch as f64 / config.epochs.max(2).saturating_sub(1) as f64;
            let scale =
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            opt.set_lr(config.lr * scale);
        }
        let mut inputs = Vec::with_capacity(examples.len());
        let mut noise = Vec::with_capacity(examples.len());
        let mut absent = 0;
        for (e, &ind) in examples.iter().zip(&indicators) {
            let code = if config.dropout > 0.0 && rng.random::<f64>() < config.dropout {
                Indicator::Absent
            } else {
                ind
            };
            if code == Indicator::Absent {
                absent += 1;
            }
            inputs.push(PolicyInput {
                obs: e.obs.clone(),
                task: e.task,
                indicator: code,
            });
            noise.push(match e.target {
                ActionTarget::Continuous(_) => Some(FlowNoise::draw(chunk_dim, &mut rng)),
                ActionTarget::Discrete(_) => None,
            });
        }
        objective.begin_epoch(&policy, &inputs, &noise)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let b_inputs: Vec<PolicyInput> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let b_targets: Vec<&ActionTarget> =
                batch.iter().map(|&i| &examples[i].target).collect();
            let b_noise: Vec<Option<&FlowNoise>> =
                batch.iter().map(|&i| noise[i].as_ref()).collect();
            let (loss, mut grads) =
                policy.loss_and_gradients(&b_inputs, &b_targets, &b_noise, |j, t| {
                    objective.weigh(batch[j], t)
                })?;
            if let Some(max) = config.max_grad_norm {
                clip_global_norm(&mut grads.all_mut(), max);
            }
            opt.step(&mut policy, &grads)?;
            total += loss * batch.len() as f64;
        }
        log.epoch_losses.push(total / examples.len() as f64);
        log.absent_per_epoch.push(absent);
    }
    Ok((policy, log))
}

/// Advantage-conditioned training: likelihood with indicator dropout.
pub fn train_policy(
    init: &PolicyNet,
    examples: &[PolicyExample],
    config: &PolicyTrainConfig,
) -> Result<(PolicyNet, PolicyTrainLog)> {
    fit(init, examples, &mut LikelihoodObjective, config)
}
