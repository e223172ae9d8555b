//! GridFold: a 9×9 pick → carry → stack gridworld.
//!
//! The agent picks an item at [`ITEM`], carries it through the single gap in a
//! row of drop cells and stacks it at [`STACK`]. Entering a drop cell while
//! carrying drops the item (failure). Episodes time out at 60 steps.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ActionChunk, ActionSpace, EnvError, EnvSpec, InitSet, Observation, Outcome, Result, StepResult,
    TaskKind, OBS_DIM,
};

pub const GRID_SIZE: i32 = 9;
pub const GRID_ACTIONS: usize = 5;
pub const ITEM: (i32, i32) = (1, 7);
pub const STACK: (i32, i32) = (7, 1);
pub const MAX_STEPS: usize = 60;
pub const STEP_DURATION: f64 = 1.0;

const UP: usize = 0;
const DOWN: usize = 1;
const LEFT: usize = 2;
const RIGHT: usize = 3;
const GRIP: usize = 4;

/// Drop cells: the row y = 4 except the gap at x = 4.
pub fn is_drop_cell(x: i32, y: i32) -> bool {
    y == 4 && x != 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridState {
    pub x: i32,
    pub y: i32,
    pub carrying: bool,
    pub t: usize,
    pub outcome: Outcome,
    /// Completed stages: 1 = picked, 2 = carried to the stack cell, 3 = stacked.
    pub max_stage: usize,
}

#[derive(Debug, Clone)]
pub struct GridFold {
    state: GridState,
    /// Steps-to-success under optimal play, indexed by `[carrying][x][y]`.
    cost_to_go: Vec<Vec<Vec<Option<usize>>>>,
}

impl Default for GridFold {
    fn default() -> Self {
        Self::new()
    }
}

impl GridFold {
    pub fn new() -> Self {
        Self {
            state: GridState {
                x: 0,
                y: 8,
                carrying: false,
                t: 0,
                outcome: Outcome::None,
                max_stage: 0,
            },
            cost_to_go: solve_cost_to_go(),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            task: TaskKind::GridFold,
            obs_dim: OBS_DIM,
            action_space: ActionSpace::Discrete { n: GRID_ACTIONS },
            max_steps: MAX_STEPS,
            step_duration: STEP_DURATION,
        }
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    /// Places the agent at an arbitrary non-terminal configuration.
    pub fn set_state(&mut self, x: i32, y: i32, carrying: bool, t: usize) {
        self.state = GridState {
            x,
            y,
            carrying,
            t,
            outcome: Outcome::None,
            max_stage: usize::from(carrying),
        };
    }

    pub fn start_cells(init: InitSet) -> Vec<(i32, i32)> {
        let mut cells = Vec::new();
        for x in 0..GRID_SIZE {
            for y in 0..GRID_SIZE {
                let ok = match init {
                    InitSet::Standard => y >= 5,
                    InitSet::Adversarial => y <= 3 && x >= 5,
                };
                if ok {
                    cells.push((x, y));
                }
            }
        }
        cells
    }

    pub fn reset(&mut self, seed: u64, init: InitSet) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = Self::start_cells(init);
        let &(x, y) = cells.choose(&mut rng).expect("non-empty start set");
        self.set_state(x, y, false, 0);
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        let n = (GRID_SIZE - 1) as f64;
        let mut f = vec![0.0; OBS_DIM];
        f[0] = s.x as f64 / n;
        f[1] = s.y as f64 / n;
        f[2] = if s.carrying { 1.0 } else { 0.0 };
        f[3] = (ITEM.0 - s.x) as f64 / n;
        f[4] = (ITEM.1 - s.y) as f64 / n;
        f[5] = (STACK.0 - s.x) as f64 / n;
        f[6] = (STACK.1 - s.y) as f64 / n;
        f[7] = s.t as f64 / MAX_STEPS as f64;
        Observation {
            features: f,
            t: s.t,
        }
    }

    pub fn step(&mut self, chunk: &ActionChunk) -> Result<StepResult> {
        if self.state.outcome != Outcome::None {
            return Err(EnvError::StepAfterTerminal);
        }
        let action = chunk
            .as_discrete()
            .filter(|&a| a < GRID_ACTIONS)
            .ok_or_else(|| EnvError::BadAction(format!("{chunk:?}")))?;
        let (next, outcome) = transition((self.state.x, self.state.y, self.state.carrying), action);
        let s = &mut self.state;
        s.t += 1;
        s.x = next.0;
        s.y = next.1;
        s.carrying = next.2;
        if s.carrying {
            s.max_stage = s.max_stage.max(1);
        }
        if s.carrying && (s.x, s.y) == STACK {
            s.max_stage = s.max_stage.max(2);
        }
        s.outcome = outcome;
        if outcome == Outcome::Success {
            s.max_stage = 3;
        } else if outcome == Outcome::None && s.t >= MAX_STEPS {
            s.outcome = Outcome::Failure;
        }
        Ok(StepResult {
            observation: self.observe(),
            terminal: self.state.outcome != Outcome::None,
            outcome: self.state.outcome,
        })
    }

    /// Steps-to-success from `(x, y, carrying)` under optimal play.
    pub fn optimal_cost(&self, x: i32, y: i32, carrying: bool) -> Option<usize> {
        self.cost_to_go[usize::from(carrying)][x as usize][y as usize]
    }

    /// Optimal action with ties broken toward the lowest action index.
    pub fn optimal_action(&self) -> usize {
        let here = (self.state.x, self.state.y, self.state.carrying);
        let mut best = (usize::MAX, 0);
        for a in 0..GRID_ACTIONS {
            let ((x, y, c), outcome) = transition(here, a);
            let cost = match outcome {
                Outcome::Success => Some(1),
                Outcome::Failure => None,
                Outcome::None => self.optimal_cost(x, y, c).map(|k| k + 1),
            };
            if let Some(cost) = cost {
                if cost < best.0 {
                    best = (cost, a);
                }
            }
        }
        best.1
    }

    pub fn expert_action<R: Rng + ?Sized>(&self, noise: f64, rng: &mut R) -> ActionChunk {
        if noise > 0.0 && rng.random::<f64>() < noise {
            return ActionChunk::Discrete(rng.random_range(0..GRID_ACTIONS));
        }
        ActionChunk::Discrete(self.optimal_action())
    }

    pub fn failure_distance(&self) -> f64 {
        if !self.state.carrying {
            return GRID_SIZE as f64 * 2.0;
        }
        let mut best = i32::MAX;
        for x in 0..GRID_SIZE {
            for y in 0..GRID_SIZE {
                if is_drop_cell(x, y) {
                    best = best.min((x - self.state.x).abs() + (y - self.state.y).abs());
                }
            }
        }
        best as f64
    }
}

/// Deterministic transition on `(x, y, carrying)`; outcome excludes timeouts.
pub fn transition(s: (i32, i32, bool), action: usize) -> ((i32, i32, bool), Outcome) {
    let (x, y, carrying) = s;
    let clamp = |v: i32| v.clamp(0, GRID_SIZE - 1);
    match action {
        GRIP => {
            if !carrying && (x, y) == ITEM {
                ((x, y, true), Outcome::None)
            } else if carrying && (x, y) == STACK {
                ((x, y, false), Outcome::Success)
            } else {
                ((x, y, carrying), Outcome::None)
            }
        }
        _ => {
            let (nx, ny) = match action {
                UP => (x, clamp(y + 1)),
                DOWN => (x, clamp(y - 1)),
                LEFT => (clamp(x - 1), y),
                RIGHT => (clamp(x + 1), y),
                _ => unreachable!("action validated by caller"),
            };
            let outcome = if carrying && is_drop_cell(nx, ny) {
                Outcome::Failure
            } else {
                Outcome::None
            };
            ((nx, ny, carrying), outcome)
        }
    }
}

/// Shortest steps-to-success over `(x, y, carrying)` by unit-cost value iteration.
fn solve_cost_to_go() -> Vec<Vec<Vec<Option<usize>>>> {
    let n = GRID_SIZE as usize;
    let mut cost = vec![vec![vec![None; n]; n]; 2];
    loop {
        let mut changed = false;
        for carrying in [false, true] {
            for x in 0..GRID_SIZE {
                for y in 0..GRID_SIZE {
                    let mut best: Option<usize> = None;
                    for a in 0..GRID_ACTIONS {
                        let ((nx, ny, nc), outcome) = transition((x, y, carrying), a);
                        let c = match outcome {
                            Outcome::Success => Some(1),
                            Outcome::Failure => None,
                            Outcome::None => cost[usize::from(nc)][nx as usize][ny as usize]
                                .map(|k: usize| k + 1),
                        };
                        if let Some(c) = c {
                            best = Some(best.map_or(c, |b: usize| b.min(c)));
                        }
                    }
                    let slot = &mut cost[usize::from(carrying)][x as usize][y as usize];
                    if let Some(b) = best {
                        if slot.is_none_or(|s| b < s) {
                            *slot = Some(b);
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return cost;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_per_seed() {
        let mut a = GridFold::new();
        let mut b = GridFold::new();
        for seed in 0..20 {
            assert_eq!(
                a.reset(seed, InitSet::Standard),
                b.reset(seed, InitSet::Standard)
            );
        }
    }

    #[test]
    fn drop_while_carrying_fails() {
        let mut env = GridFold::new();
        env.set_state(3, 5, true, 0);
        let r = env.step(&ActionChunk::Discrete(DOWN)).unwrap();
        assert!(r.terminal);
        assert_eq!(r.outcome, Outcome::Failure);
        assert!(matches!(
            env.step(&ActionChunk::Discrete(UP)),
            Err(EnvError::StepAfterTerminal)
        ));
    }

    #[test]
    fn drop_cells_are_harmless_when_empty_handed() {
        let mut env = GridFold::new();
        env.set_state(3, 5, false, 0);
        let r = env.step(&ActionChunk::Discrete(DOWN)).unwrap();
        assert!(!r.terminal);
    }

    #[test]
    fn times_out_at_max_steps() {
        let mut env = GridFold::new();
        env.reset(0, InitSet::Standard);
        let mut last = None;
        for _ in 0..MAX_STEPS {
            last = Some(env.step(&ActionChunk::Discrete(GRIP)).unwrap());
        }
        let r = last.unwrap();
        assert!(r.terminal);
        assert_eq!(r.outcome, Outcome::Failure);
        assert_eq!(env.state().t, MAX_STEPS);
    }

    #[test]
    fn stages_are_tracked() {
        let mut env = GridFold::new();
        env.set_state(ITEM.0, ITEM.1, false, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while !env
            .step(&env.expert_action(0.0, &mut rng))
            .unwrap()
            .terminal
        {}
        assert_eq!(env.state().outcome, Outcome::Success);
        assert_eq!(env.state().max_stage, 3);
    }

    #[test]
    fn rejects_continuous_actions() {
        let mut env = GridFold::new();
        env.reset(1, InitSet::Standard);
        assert!(env.step(&ActionChunk::constant(1, &[0.0])).is_err());
        assert!(env.step(&ActionChunk::Discrete(9)).is_err());
    }
}
