//! Random tabular MDPs with exact policy evaluation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recap_core::policy::conditioned_distribution;

pub struct Mdp {
    pub states: usize,
    pub actions: usize,
    /// `trans[s][a][s']`; the remaining mass terminates the episode.
    pub trans: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub start: Vec<f64>,
}

pub fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let x: Vec<f64> = (0..n)
        .map(|_| -rng.random::<f64>().max(1e-12).ln())
        .collect();
    let s: f64 = x.iter().sum();
    x.into_iter().map(|v| v / s).collect()
}

pub fn random_mdp(rng: &mut ChaCha8Rng) -> Mdp {
    let states = rng.random_range(2..=20);
    let actions = rng.random_range(2..=4);
    let trans = (0..states)
        .map(|_| {
            (0..actions)
                .map(|_| {
                    let stay = 1.0 - rng.random_range(0.05..0.5);
                    random_simplex(states, rng)
                        .into_iter()
                        .map(|p| p * stay)
                        .collect()
                })
                .collect()
        })
        .collect();
    let reward = (0..states)
        .map(|_| (0..actions).map(|_| -rng.random::<f64>()).collect())
        .collect();
    Mdp {
        states,
        actions,
        trans,
        reward,
        start: random_simplex(states, rng),
    }
}

/// Exact `V^π` by solving `(I − P_π) V = r_π`.
pub fn evaluate(mdp: &Mdp, pi: &[Vec<f64>]) -> Vec<f64> {
    let n = mdp.states;
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        for act in 0..mdp.actions {
            let p = pi[s][act];
            b[s] += p * mdp.reward[s][act];
            for t in 0..n {
                a[(s, t)] -= p * mdp.trans[s][act][t];
            }
        }
    }
    let v = a.lu().solve(&b).expect("terminating chain is invertible");
    v.iter().copied().collect()
}

pub fn q_values(mdp: &Mdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.states)
        .map(|s| {
            (0..mdp.actions)
                .map(|a| {
                    mdp.reward[s][a]
                        + mdp.trans[s][a]
                            .iter()
                            .zip(v)
                            .map(|(p, x)| p * x)
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn objective(mdp: &Mdp, pi: &[Vec<f64>]) -> f64 {
    evaluate(mdp, pi)
        .iter()
        .zip(&mdp.start)
        .map(|(v, p)| v * p)
        .sum()
}

pub fn advantages(mdp: &Mdp, pi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let v = evaluate(mdp, pi);
    q_values(mdp, &v)
        .iter()
        .zip(&v)
        .map(|(qs, vs)| qs.iter().map(|x| x - vs).collect())
        .collect()
}

/// Outcome of comparing `J(π̂)` against `J(π_ref)` over many MDPs and thresholds.
#[derive(Debug, Default)]
pub struct ImprovementReport {
    pub mdps: usize,
    pub cases: usize,
    /// Smallest `J(π̂) − J(π_ref)` seen.
    pub worst_gap: f64,
}

/// Conditions a random reference policy on `A ≥ ε` for several thresholds
/// with a non-empty positive set and records the improvement gap.
pub fn improvement_check(seed: u64, mdps: usize) -> ImprovementReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ImprovementReport {
        worst_gap: f64::INFINITY,
        ..Default::default()
    };
    for _ in 0..mdps {
        let mdp = random_mdp(&mut rng);
        let pi_ref: Vec<Vec<f64>> = (0..mdp.states)
            .map(|_| random_simplex(mdp.actions, &mut rng))
            .collect();
        let adv = advantages(&mdp, &pi_ref);
        let j_ref = objective(&mdp, &pi_ref);
        let mut all: Vec<f64> = adv.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        let mut epsilons: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9]
            .iter()
            .map(|f| all[(f * (all.len() - 1) as f64) as usize])
            .collect();
        epsilons.extend([-1.0, 0.0]);
        for eps in epsilons {
            if !all.iter().any(|&a| a > eps) {
                continue;
            }
            let pi_hat: Vec<Vec<f64>> = pi_ref
                .iter()
                .zip(&adv)
                .map(|(p, a)| conditioned_distribution(p, a, eps))
                .collect();
            report.worst_gap = report.worst_gap.min(objective(&mdp, &pi_hat) - j_ref);
            report.cases += 1;
        }
        report.mdps += 1;
    }
    report
}
