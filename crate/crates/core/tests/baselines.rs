use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recap_core::approx::gradcheck::{central_differences, max_relative_error};
use recap_core::baselines::{
    awr_loss, awr_weight, spo_loss, spo_objective, train_baseline, AwrConfig, AwrObjective,
    BaselineConfig, BaselineMethod, RatioRecord, SpoConfig, SpoObjective,
};
use recap_core::policy::{
    ActionTarget, FlowNoise, HeadKind, Objective, PolicyArch, PolicyDims, PolicyExample,
    PolicyInput, PolicyNet, PolicyTrainConfig,
};
use recap_core::value::Indicator;

fn bandit_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 1,
        task_heads: vec![HeadKind::Discrete],
        discrete_actions: 2,
        horizon: 0,
        action_dim: 0,
        bins: 2,
    }
}

fn mixed_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 2,
        task_heads: vec![HeadKind::Discrete, HeadKind::Flow],
        discrete_actions: 3,
        horizon: 2,
        action_dim: 1,
        bins: 5,
    }
}

fn tiny_arch() -> PolicyArch {
    PolicyArch {
        trunk: vec![5],
        flow_hidden: vec![6],
    }
}

/// Four examples over both heads with their per-epoch noise.
fn mixed_batch(
    seed: u64,
) -> (
    Vec<PolicyExample>,
    Vec<PolicyInput>,
    Vec<Option<FlowNoise>>,
    Vec<f64>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::new();
    let mut noise = Vec::new();
    for i in 0..4 {
        let obs: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (task, target, n) = if i % 2 == 0 {
            (0, ActionTarget::Discrete(rng.random_range(0..3)), None)
        } else {
            let chunk = (0..2).map(|_| rng.random_range(-0.9..0.9)).collect();
            (
                1,
                ActionTarget::Continuous(chunk),
                Some(FlowNoise::draw(2, &mut rng)),
            )
        };
        examples.push(PolicyExample {
            obs,
            task,
            indicator: Some(Indicator::Absent),
            target,
        });
        noise.push(n);
    }
    let inputs = examples
        .iter()
        .map(|e| PolicyInput::new(&e.obs, e.task, Indicator::Absent))
        .collect();
    let advantages = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    (examples, inputs, noise, advantages)
}

fn objective_gradient_error<O: Objective>(
    policy: &PolicyNet,
    examples: &[PolicyExample],
    inputs: &[PolicyInput],
    noise: &[Option<FlowNoise>],
    objective: &O,
) -> f64 {
    let targets: Vec<&ActionTarget> = examples.iter().map(|e| &e.target).collect();
    let noise: Vec<Option<&FlowNoise>> = noise.iter().map(Option::as_ref).collect();
    let eval = |p: &PolicyNet| {
        p.loss_and_gradients(inputs, &targets, &noise, |i, t| objective.weigh(i, t))
            .unwrap()
    };
    let analytic: Vec<Vec<f64>> = eval(policy).1.blocks().into_iter().cloned().collect();
    let numeric = central_differences(policy, |p: &PolicyNet| eval(p).0, 1e-4);
    max_relative_error(&analytic, &numeric)
}

#[test]
fn awr_gradients_match_finite_differences() {
    for seed in 0..10 {
        let policy = PolicyNet::new(mixed_dims(), &tiny_arch(), seed).unwrap();
        let (examples, inputs, noise, adv) = mixed_batch(seed);
        let objective = AwrObjective::new(&adv, &AwrConfig::default()).unwrap();
        let err = objective_gradient_error(&policy, &examples, &inputs, &noise, &objective);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn spo_gradients_match_finite_differences() {
    for seed in 0..10 {
        let policy = PolicyNet::new(mixed_dims(), &tiny_arch(), seed).unwrap();
        // Reference from a different network so the ratios differ from one.
        let reference = PolicyNet::new(mixed_dims(), &tiny_arch(), seed + 100).unwrap();
        let (examples, inputs, noise, adv) = mixed_batch(seed);
        let config = SpoConfig {
            epsilon_ar: 0.3,
            epsilon_flow: 0.2,
            alpha: 0.7,
        };
        let mut objective = SpoObjective::new(&examples, &adv, config).unwrap();
        objective.begin_epoch(&reference, &inputs, &noise).unwrap();
        let err = objective_gradient_error(&policy, &examples, &inputs, &noise, &objective);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn spo_objective_equals_loss_of_its_records() {
    let policy = PolicyNet::new(mixed_dims(), &tiny_arch(), 3).unwrap();
    let reference = PolicyNet::new(mixed_dims(), &tiny_arch(), 4).unwrap();
    let (examples, inputs, noise, adv) = mixed_batch(3);
    let config = SpoConfig::default();
    let mut objective = SpoObjective::new(&examples, &adv, config).unwrap();
    objective.begin_epoch(&reference, &inputs, &noise).unwrap();
    let targets: Vec<&ActionTarget> = examples.iter().map(|e| &e.target).collect();
    let n: Vec<Option<&FlowNoise>> = noise.iter().map(Option::as_ref).collect();
    let terms = policy.example_terms(&inputs, &targets, &n).unwrap();
    let (mut ar, mut flow) = (Vec::new(), Vec::new());
    let mut direct = 0.0;
    for (i, &t) in terms.iter().enumerate() {
        let (a, f) = objective.records(i, t);
        ar.push(a);
        flow.extend(f);
        direct += objective.weigh(i, t).loss;
    }
    assert_eq!(flow.len(), 2);
    let total = spo_loss(&ar, &flow, &config).unwrap();
    assert!((total - direct).abs() < 1e-9 * total.abs().max(1.0));
}

#[test]
fn awr_loss_scales_plain_likelihood() {
    let policy = PolicyNet::new(bandit_dims(), &tiny_arch(), 0).unwrap();
    let target = ActionTarget::Discrete(1);
    let config = AwrConfig::default();
    let base = awr_loss(&policy, &[0.0], 0, &target, None, 0.0, &config).unwrap();
    let probs = policy.discrete_probs(&PolicyInput::new(&[0.0], 0, Indicator::Absent));
    assert!((base + probs[1].ln()).abs() < 1e-9);
    let weighted = awr_loss(&policy, &[0.0], 0, &target, None, 0.5, &config).unwrap();
    assert!((weighted - base * std::f64::consts::E).abs() < 1e-9);
}

fn bandit_examples(n: usize) -> (Vec<PolicyExample>, Vec<f64>) {
    (0..n)
        .map(|i| {
            let good = i % 2 == 0;
            let e = PolicyExample {
                obs: vec![0.0],
                task: 0,
                indicator: Some(Indicator::Absent),
                target: ActionTarget::Discrete(if good { 0 } else { 1 }),
            };
            (e, if good { 1.0 } else { -1.0 })
        })
        .unzip()
}

#[test]
fn awr_recovers_the_good_bandit_action() {
    let (examples, adv) = bandit_examples(400);
    let init = PolicyNet::new(bandit_dims(), &tiny_arch(), 1).unwrap();
    let config = BaselineConfig {
        train: PolicyTrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let (policy, _) = train_baseline(&init, &examples, &adv, BaselineMethod::Awr, &config).unwrap();
    let p = policy.discrete_probs(&PolicyInput::new(&[0.0], 0, Indicator::Absent))[0];
    let e2 = 2f64.exp();
    let fixed_point = e2 / (e2 + 1.0 / e2);
    assert!(p >= fixed_point - 0.05, "{p} vs {fixed_point}");
}

#[test]
fn vanishing_trust_region_pins_the_policy() {
    let (examples, adv) = bandit_examples(400);
    let init = PolicyNet::new(bandit_dims(), &tiny_arch(), 2).unwrap();
    let config = BaselineConfig {
        spo: SpoConfig {
            epsilon_ar: 1e-6,
            epsilon_flow: 1e-6,
            alpha: 1.0,
        },
        train: PolicyTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let (policy, _) = train_baseline(&init, &examples, &adv, BaselineMethod::Spo, &config).unwrap();
    let input = PolicyInput::new(&[0.0], 0, Indicator::Absent);
    let (p0, p1) = (init.discrete_probs(&input), policy.discrete_probs(&input));
    let tv = 0.5 * p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv <= 0.05, "{p0:?} → {p1:?}");
}

#[test]
fn default_trust_region_moves_toward_good_action() {
    let (examples, adv) = bandit_examples(400);
    let init = PolicyNet::new(bandit_dims(), &tiny_arch(), 2).unwrap();
    let config = BaselineConfig {
        train: PolicyTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let (policy, _) = train_baseline(&init, &examples, &adv, BaselineMethod::Spo, &config).unwrap();
    let input = PolicyInput::new(&[0.0], 0, Indicator::Absent);
    assert!(policy.discrete_probs(&input)[0] > init.discrete_probs(&input)[0]);
}

#[test]
fn mismatched_advantages_are_rejected() {
    let (examples, _) = bandit_examples(4);
    let init = PolicyNet::new(bandit_dims(), &tiny_arch(), 0).unwrap();
    assert!(train_baseline(
        &init,
        &examples,
        &[1.0],
        BaselineMethod::Awr,
        &BaselineConfig::default()
    )
    .is_err());
}

/// Golden-section maximization on an interval.
fn argmax(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    0.5 * (lo + hi)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn spo_maximizer_is_one_plus_signed_epsilon(
        a in prop_oneof![-5.0f64..-0.01, 0.01f64..5.0],
        eps in 0.001f64..0.5,
    ) {
        let best = argmax(|r| spo_objective(r, a, eps), 0.0, 3.0);
        prop_assert!((best - (1.0 + eps * a.signum())).abs() < 1e-6);
    }

    #[test]
    fn penalty_vanishes_only_at_unit_ratio(
        a in prop_oneof![-5.0f64..-0.01, 0.01f64..5.0],
        ratio in 0.01f64..5.0,
        eps in 0.001f64..1.0,
    ) {
        let penalty = ratio * a - spo_objective(ratio, a, eps);
        prop_assert_eq!(ratio * a - spo_objective(1.0, a, eps), ratio * a - a);
        prop_assume!((ratio - 1.0).abs() > 1e-6);
        prop_assert!(penalty > 0.0);
    }

    #[test]
    fn awr_weights_are_bounded(a in -50.0f64..50.0, beta in 0.01f64..5.0, wmax in 1.0f64..100.0) {
        let w = awr_weight(a, &AwrConfig { beta, max_weight: wmax });
        prop_assert!(w > 0.0 || a / beta < -700.0);
        prop_assert!(w <= wmax);
    }

    #[test]
    fn ratios_are_positive(cur in -100.0f64..100.0, reference in -100.0f64..100.0) {
        prop_assert!(RatioRecord::discrete(cur, reference, 1.0).ratio > 0.0);
        prop_assert!(RatioRecord::continuous(cur, reference, 1.0).ratio > 0.0);
    }
}
