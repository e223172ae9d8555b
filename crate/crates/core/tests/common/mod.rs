//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod mdp;
pub mod toys;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap_core::envs::{spec_for, Env, GridFold, InitSet, TaskKind, GRID_ACTIONS};
use recap_core::returns::{discretize, normalized_trace};
use recap_core::value::{train_value, value_input, ValueConfig, ValueEstimator, ValueSample};

pub type GridKey = (i32, i32, bool);
pub type Table = HashMap<(GridKey, usize), (GridKey, u8)>;

pub const GRID_MAX_STEPS: usize = 60;

/// Tabular GridFold dynamics written out independently of the env code:
/// (x, y, carrying) × action → (next, code) with 0 = running, 1 = success,
/// 2 = dropped.
pub fn reference_table() -> Table {
    let mut table = HashMap::new();
    for x in 0..9 {
        for y in 0..9 {
            for carrying in [false, true] {
                let moves = [(0, 1), (0, -1), (-1, 0), (1, 0)];
                for (a, (dx, dy)) in moves.iter().enumerate() {
                    let nx = (x + dx).max(0).min(8);
                    let ny = (y + dy).max(0).min(8);
                    let dropped = carrying && ny == 4 && nx != 4;
                    table.insert(
                        ((x, y, carrying), a),
                        ((nx, ny, carrying), if dropped { 2 } else { 0 }),
                    );
                }
                let grip = if !carrying && x == 1 && y == 7 {
                    ((x, y, true), 0)
                } else if carrying && x == 7 && y == 1 {
                    ((x, y, false), 1)
                } else {
                    ((x, y, carrying), 0)
                };
                table.insert(((x, y, carrying), 4), grip);
            }
        }
    }
    table
}

/// Action probabilities of the noisy GridFold expert at `s`.
pub fn noisy_expert_probs(env: &mut GridFold, s: GridKey, noise: f64) -> [f64; GRID_ACTIONS] {
    env.set_state(s.0, s.1, s.2, 0);
    let best = env.optimal_action();
    let mut p = [noise / GRID_ACTIONS as f64; GRID_ACTIONS];
    p[best] += 1.0 - noise;
    p
}

/// Exact normalized-return values `V[(s, t)]` of the noisy expert by
/// backward induction over time, tracking success probability and the
/// expected remaining steps on success separately (failures clamp to −1).
pub fn gridfold_policy_values(noise: f64) -> HashMap<(GridKey, usize), f64> {
    let table = reference_table();
    let mut env = GridFold::new();
    let keys: Vec<GridKey> = (0..9)
        .flat_map(|x| (0..9).flat_map(move |y| [(x, y, false), (x, y, true)]))
        .collect();
    let probs: HashMap<GridKey, [f64; GRID_ACTIONS]> = keys
        .iter()
        .map(|&k| (k, noisy_expert_probs(&mut env, k, noise)))
        .collect();
    // (P(success), E[steps · 1{success}]) at t + 1.
    let mut next: HashMap<GridKey, (f64, f64)> = keys.iter().map(|&k| (k, (0.0, 0.0))).collect();
    let mut values = HashMap::new();
    let l = GRID_MAX_STEPS as f64;
    for t in (0..GRID_MAX_STEPS).rev() {
        let mut cur = HashMap::new();
        for &k in &keys {
            let (mut s, mut m) = (0.0, 0.0);
            for a in 0..GRID_ACTIONS {
                let (n, code) = table[&(k, a)];
                let p = probs[&k][a];
                match code {
                    1 => {
                        s += p;
                        m += p;
                    }
                    2 => {}
                    _ if t + 1 >= GRID_MAX_STEPS => {}
                    _ => {
                        let (sn, mn) = next[&n];
                        s += p * sn;
                        m += p * (mn + sn);
                    }
                }
            }
            cur.insert(k, (s, m));
            values.insert((k, t), -m / l - (1.0 - s));
        }
        next = cur;
    }
    values
}

/// Decodes GridFold observation features back to `(x, y, carrying)` and `t`.
pub fn decode_grid(features: &[f64]) -> (GridKey, usize) {
    let x = (features[0] * 8.0).round() as i32;
    let y = (features[1] * 8.0).round() as i32;
    let t = (features[7] * GRID_MAX_STEPS as f64).round() as usize;
    ((x, y, features[2] > 0.5), t)
}

/// Value table lookup usable wherever a critic is expected.
pub struct TabularValue(pub HashMap<(GridKey, usize), f64>);

impl ValueEstimator for TabularValue {
    fn value(&self, features: &[f64], task: TaskKind) -> f64 {
        assert_eq!(task, TaskKind::GridFold);
        let (k, t) = decode_grid(features);
        self.0.get(&(k, t)).copied().unwrap_or(0.0)
    }
}

/// One GridFold episode: observations `o_0..=o_T` and normalized returns-to-go.
pub struct Rollout {
    pub observations: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
}

pub fn gridfold_rollouts(n: usize, noise: f64, seed: u64) -> Vec<Rollout> {
    let spec = spec_for(TaskKind::GridFold);
    let mut env = Env::new(TaskKind::GridFold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut observations = vec![
                env.reset(seed * 100_000 + i as u64, InitSet::Standard)
                    .features,
            ];
            while !env.is_terminal() {
                observations.push(
                    env.step(&env.expert_action(noise, &mut rng))
                        .unwrap()
                        .observation
                        .features,
                );
            }
            let returns = normalized_trace(env.outcome(), env.t(), &spec)
                .unwrap()
                .values;
            Rollout {
                observations,
                returns,
            }
        })
        .collect()
}

pub fn samples_of(rollouts: &[Rollout], task: TaskKind) -> Vec<ValueSample> {
    rollouts
        .iter()
        .flat_map(|r| {
            r.observations
                .iter()
                .zip(&r.returns)
                .map(move |(o, &ret)| ValueSample {
                    input: value_input(o, task),
                    bin: discretize(ret).unwrap(),
                })
        })
        .collect()
}

/// Trains a critic on noisy-expert GridFold rollouts and counts the visited
/// `(state, t)` pairs whose expected value lies within 0.05 of the exact one.
/// Returns `(within, visited)`.
pub fn gridfold_value_agreement(
    noise: f64,
    episodes: usize,
    seed: u64,
    config: &ValueConfig,
) -> (usize, usize) {
    let exact = gridfold_policy_values(noise);
    let rollouts = gridfold_rollouts(episodes, noise, seed);
    let (v, _) = train_value(None, &samples_of(&rollouts, TaskKind::GridFold), config).unwrap();
    let mut visited: HashMap<(GridKey, usize), &[f64]> = HashMap::new();
    for r in &rollouts {
        for o in &r.observations[..r.observations.len() - 1] {
            visited.entry(decode_grid(o)).or_insert(o);
        }
    }
    let within = visited
        .iter()
        .filter(|(key, o)| (v.value(o, TaskKind::GridFold) - exact[*key]).abs() <= 0.05)
        .count();
    (within, visited.len())
}
