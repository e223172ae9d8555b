//! Small policy-learning problems with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recap_core::approx::gradcheck::{central_differences, max_relative_error};
use recap_core::policy::{
    train_policy, ActionTarget, ExampleTerms, FlowNoise, HeadKind, Objective, PolicyArch,
    PolicyDims, PolicyExample, PolicyInput, PolicyNet, PolicyTrainConfig, WeightedTerms,
};
use recap_core::value::Indicator;

pub fn bandit_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 1,
        task_heads: vec![HeadKind::Discrete],
        discrete_actions: 2,
        horizon: 0,
        action_dim: 0,
        bins: 2,
    }
}

pub fn line_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 1,
        task_heads: vec![HeadKind::Flow],
        discrete_actions: 0,
        horizon: 1,
        action_dim: 1,
        bins: 15,
    }
}

pub fn small_arch() -> PolicyArch {
    PolicyArch {
        trunk: vec![32],
        flow_hidden: vec![64, 64],
    }
}

pub fn example(obs: f64, indicator: Indicator, target: ActionTarget) -> PolicyExample {
    PolicyExample {
        obs: vec![obs],
        task: 0,
        indicator: Some(indicator),
        target,
    }
}

pub fn bandit_data(
    n: usize,
    good_share: f64,
    labels: impl Fn(bool, &mut ChaCha8Rng) -> Indicator,
) -> Vec<PolicyExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let good = (i as f64) < good_share * n as f64;
            let ind = labels(good, &mut rng);
            example(0.0, ind, ActionTarget::Discrete(if good { 0 } else { 1 }))
        })
        .collect()
}

pub fn bandit_config() -> PolicyTrainConfig {
    PolicyTrainConfig {
        epochs: 60,
        batch_size: 32,
        lr: 3e-3,
        ..Default::default()
    }
}

pub fn guidance_policy() -> &'static PolicyNet {
    static POLICY: std::sync::OnceLock<PolicyNet> = std::sync::OnceLock::new();
    POLICY.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Mixed-quality labels: the good mode is marked positive 70% of the
        // time, the bad mode 30% of the time.
        let data: Vec<PolicyExample> = (0..600)
            .map(|i| {
                let good = i % 2 == 0;
                let p = if good { 0.7 } else { 0.3 };
                let ind = if rng.random::<f64>() < p {
                    Indicator::Positive
                } else {
                    Indicator::Negative
                };
                example(
                    0.0,
                    ind,
                    ActionTarget::Continuous(vec![if good { 0.5 } else { -0.5 }]),
                )
            })
            .collect();
        let init = PolicyNet::new(line_dims(), &small_arch(), 9).unwrap();
        let config = PolicyTrainConfig {
            epochs: 150,
            batch_size: 64,
            lr: 2e-3,
            ..Default::default()
        };
        train_policy(&init, &data, &config).unwrap().0
    })
}

pub fn good_fraction(policy: &PolicyNet, beta: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 2000;
    let good = (0..n)
        .filter(|_| {
            let a = policy
                .sample_actions_cfg(&[0.0], 0, beta, 10, &mut rng)
                .unwrap();
            a.commands().unwrap()[0] > 0.0
        })
        .count();
    good as f64 / n as f64
}

struct Weighted(Vec<f64>);

impl Objective for Weighted {
    fn weigh(&self, i: usize, t: ExampleTerms) -> WeightedTerms {
        // A smooth nonlinear objective exercising both sensitivities.
        let w = self.0[i];
        WeightedTerms {
            loss: w * t.ce + (w * t.flow).sin(),
            d_ce: w,
            d_flow: w * (w * t.flow).cos(),
        }
    }
}

fn gradient_error(
    policy: &PolicyNet,
    inputs: &[PolicyInput],
    targets: &[ActionTarget],
    noise: &[Option<FlowNoise>],
    obj: &Weighted,
) -> f64 {
    let t: Vec<&ActionTarget> = targets.iter().collect();
    let n: Vec<Option<&FlowNoise>> = noise.iter().map(|x| x.as_ref()).collect();
    let (_, grads) = policy
        .loss_and_gradients(inputs, &t, &n, |i, x| obj.weigh(i, x))
        .unwrap();
    let analytic: Vec<Vec<f64>> = grads.blocks().into_iter().cloned().collect();
    let numeric = central_differences(
        policy,
        |p: &PolicyNet| {
            p.loss_and_gradients(inputs, &t, &n, |i, x| obj.weigh(i, x))
                .unwrap()
                .0
        },
        1e-4,
    );
    max_relative_error(&analytic, &numeric)
}

/// Worst relative error between analytic and central-difference gradients of a
/// smooth weighted objective on a small two-head policy with random data.
pub fn policy_gradient_error(seed: u64) -> f64 {
    let dims = PolicyDims {
        obs_dim: 3,
        task_heads: vec![HeadKind::Discrete, HeadKind::Flow],
        discrete_actions: 3,
        horizon: 2,
        action_dim: 2,
        bins: 4,
    };
    let arch = PolicyArch {
        trunk: vec![6, 5],
        flow_hidden: vec![7],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = PolicyNet::new(dims.clone(), &arch, seed).unwrap();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut noise = Vec::new();
    for i in 0..4 {
        let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ind = [Indicator::Positive, Indicator::Negative, Indicator::Absent][i % 3];
        if i % 2 == 0 {
            inputs.push(PolicyInput::new(&obs, 0, ind));
            targets.push(ActionTarget::Discrete(rng.random_range(0..3)));
            noise.push(None);
        } else {
            inputs.push(PolicyInput::new(&obs, 1, ind));
            targets.push(ActionTarget::Continuous(
                (0..4).map(|_| rng.random_range(-0.9..0.9)).collect(),
            ));
            noise.push(Some(FlowNoise::draw(4, &mut rng)));
        }
    }
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
    gradient_error(&policy, &inputs, &targets, &noise, &Weighted(weights))
}
