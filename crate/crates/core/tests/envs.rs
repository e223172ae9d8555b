mod common;

use std::collections::{HashMap, VecDeque};

use common::{reference_table, Table};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recap_core::envs::{
    ActionChunk, Env, GridFold, InitSet, Outcome, PointMassLayout, TaskKind, GRID_ACTIONS,
};

/// Breadth-first search over the reference table for steps-to-success.
fn bfs_cost(table: &Table, start: (i32, i32, bool)) -> Option<usize> {
    let mut seen = HashMap::new();
    let mut queue = VecDeque::from([(start, 0usize)]);
    seen.insert(start, 0);
    while let Some((s, d)) = queue.pop_front() {
        for a in 0..5 {
            let (next, code) = table[&(s, a)];
            match code {
                1 => return Some(d + 1),
                2 => continue,
                _ => {
                    if !seen.contains_key(&next) {
                        seen.insert(next, d + 1);
                        queue.push_back((next, d + 1));
                    }
                }
            }
        }
    }
    None
}

#[test]
fn gridfold_transitions_match_tabular_reference() {
    let table = reference_table();
    let mut env = GridFold::new();
    let mut checked = 0;
    for (&((x, y, c), a), &((nx, ny, nc), code)) in &table {
        env.set_state(x, y, c, 0);
        let r = env.step(&ActionChunk::Discrete(a)).unwrap();
        let s = env.state();
        assert_eq!(
            (s.x, s.y, s.carrying),
            (nx, ny, nc),
            "state {x},{y},{c} action {a}"
        );
        let expected = match code {
            0 => Outcome::None,
            1 => Outcome::Success,
            _ => Outcome::Failure,
        };
        assert_eq!(r.outcome, expected, "state {x},{y},{c} action {a}");
        checked += 1;
    }
    assert_eq!(checked, 9 * 9 * 2 * GRID_ACTIONS);
}

#[test]
fn gridfold_optimal_play_hits_bfs_step_count() {
    let table = reference_table();
    let mut env = GridFold::new();
    for &(x, y) in &GridFold::start_cells(InitSet::Standard) {
        let optimal = bfs_cost(&table, (x, y, false)).unwrap();
        assert_eq!(env.optimal_cost(x, y, false), Some(optimal));
        env.set_state(x, y, false, 0);
        let mut steps = 0;
        loop {
            steps += 1;
            let r = env
                .step(&ActionChunk::Discrete(env.optimal_action()))
                .unwrap();
            if r.terminal {
                assert_eq!(r.outcome, Outcome::Success);
                break;
            }
        }
        assert_eq!(steps, optimal, "start ({x},{y})");
    }
}

#[test]
fn gridfold_expert_agrees_with_bfs_optimum() {
    let table = reference_table();
    let mut env = GridFold::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut agree, mut total) = (0, 0);
    for x in 0..9 {
        for y in 0..9 {
            for c in [false, true] {
                if c && y == 4 && x != 4 {
                    continue;
                }
                let Some(here) = bfs_cost(&table, (x, y, c)) else {
                    continue;
                };
                env.set_state(x, y, c, 0);
                let a = env.expert_action(0.0, &mut rng).as_discrete().unwrap();
                let (next, code) = table[&((x, y, c), a)];
                let after = match code {
                    1 => Some(0),
                    2 => None,
                    _ => bfs_cost(&table, next),
                };
                total += 1;
                if after.map(|k| k + 1) == Some(here) {
                    agree += 1;
                }
            }
        }
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn noiseless_expert_solves_every_standard_start() {
    for task in TaskKind::ALL {
        let mut env = Env::new(task);
        for seed in 0..100 {
            env.reset(seed, InitSet::Standard);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while !env
                .step(&env.expert_action(0.0, &mut rng))
                .unwrap()
                .terminal
            {}
            assert_eq!(env.outcome(), Outcome::Success, "{task} seed {seed}");
        }
    }
}

#[test]
fn noiseless_expert_solves_collar_adversarial_starts() {
    let mut env = Env::new(TaskKind::CollarFlip);
    for seed in 0..100 {
        env.reset(seed, InitSet::Adversarial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut closest = f64::INFINITY;
        while !env
            .step(&env.expert_action(0.0, &mut rng))
            .unwrap()
            .terminal
        {
            closest = closest.min(env.failure_distance());
        }
        assert_eq!(env.outcome(), Outcome::Success, "seed {seed}");
        assert!(closest > 0.0);
    }
}

#[test]
fn standard_reset_mean_within_three_sigma() {
    for layout in [PointMassLayout::Corridor, PointMassLayout::Collar] {
        let mut env = recap_core::envs::PointMass::new(layout);
        let mean = env.standard_start_mean();
        let half = env.standard_start_half_widths();
        let n = 1000;
        let mut sum = [0.0; 2];
        for seed in 0..n {
            env.reset(seed, InitSet::Standard);
            let p = env.state().position;
            sum[0] += p[0];
            sum[1] += p[1];
        }
        for d in 0..2 {
            // Uniform on [m − h, m + h] has standard deviation h/√3.
            let sigma = half[d] / 3f64.sqrt() / (n as f64).sqrt();
            let emp = sum[d] / n as f64;
            assert!(
                (emp - mean[d]).abs() < 3.0 * sigma,
                "{layout:?} dim {d}: {emp} vs {}",
                mean[d]
            );
        }
    }
}

#[test]
fn adversarial_starts_lie_in_hard_region() {
    for layout in [PointMassLayout::Corridor, PointMassLayout::Collar] {
        let mut env = recap_core::envs::PointMass::new(layout);
        for seed in 0..200 {
            env.reset(seed, InitSet::Adversarial);
            assert!(env.in_hard_start_region(env.state().position));
        }
    }
    for &(x, y) in &GridFold::start_cells(InitSet::Adversarial) {
        assert!(y < 4);
        assert!(x >= 5);
    }
}

#[test]
fn flawed_demonstrator_takes_wrong_mode_at_scripted_rate() {
    let mut env = Env::new(TaskKind::CollarFlip);
    let n = 500;
    let mut wrong = 0;
    for seed in 0..n {
        env.reset(seed, InitSet::Adversarial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while !env.step(&env.demo_action(0.0, &mut rng)).unwrap().terminal {}
        if env.as_point_mass().unwrap().state().wrong_mode {
            wrong += 1;
        }
    }
    let frac = wrong as f64 / n as f64;
    // Binomial(500, 0.6): σ ≈ 0.022.
    assert!((frac - 0.6).abs() < 0.07, "wrong-mode fraction {frac}");
}

#[test]
fn rollouts_are_seed_deterministic() {
    for task in TaskKind::ALL {
        let run = || {
            let mut env = Env::new(task);
            let mut obs = vec![env.reset(11, InitSet::Standard)];
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            while !env.is_terminal() {
                obs.push(
                    env.step(&env.expert_action(0.3, &mut rng))
                        .unwrap()
                        .observation,
                );
            }
            (obs, env.outcome())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn every_episode_terminates_by_max_steps() {
    for task in TaskKind::ALL {
        let mut env = Env::new(task);
        let max = env.spec().max_steps;
        for seed in 0..30 {
            env.reset(seed, InitSet::Standard);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            while !env.is_terminal() {
                env.step(&env.expert_action(1.0, &mut rng)).unwrap();
            }
            assert!(env.t() <= max);
            assert_ne!(env.outcome(), Outcome::None);
        }
    }
}
