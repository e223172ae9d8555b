//! ReachChunk and CollarFlip: a 2-D point mass driven by chunks of velocity
//! commands.
//!
//! Each environment step consumes a chunk of [`HORIZON`] commands in
//! [−1, 1]²; one command moves the agent by at most [`SUB_STEP`]. The goal sits
//! at the origin and counts as reached inside [`GOAL_RADIUS`] while moving
//! slower than [`SPEED_LIMIT`] per environment step.
//!
//! ReachChunk routes the agent through a walled corridor. CollarFlip puts a
//! round obstacle between start and goal; passing above it is the correct
//! mode, passing below completes the task the wrong way and is a failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ActionChunk, ActionSpace, EnvError, EnvSpec, InitSet, Observation, Outcome, Result, StepResult,
    TaskKind, OBS_DIM,
};

pub const HORIZON: usize = 5;
pub const ACTION_DIM: usize = 2;
pub const SUB_STEP: f64 = 0.01;
pub const MAX_STEPS: usize = 100;
pub const STEP_DURATION: f64 = 0.1;
pub const GOAL_RADIUS: f64 = 0.05;
pub const SPEED_LIMIT: f64 = 0.02;

/// Corridor walls occupy |y| ≥ CORRIDOR_HALF_WIDTH for x in [CORRIDOR_X.0, CORRIDOR_X.1].
pub const CORRIDOR_HALF_WIDTH: f64 = 0.05;
pub const CORRIDOR_X: (f64, f64) = (-0.45, -0.05);
/// Everything beyond this x is a spill region (overshooting the goal).
pub const CORRIDOR_BACK_EDGE: f64 = 0.08;
pub const COLLAR_BACK_EDGE: f64 = 0.2;

pub const OBSTACLE_CENTER: [f64; 2] = [-0.25, 0.0];
pub const OBSTACLE_RADIUS: f64 = 0.08;
/// Fraction of adversarial CollarFlip starts on which the flawed demonstrator
/// takes the wrong mode.
pub const FLAWED_FRACTION: f64 = 0.6;

const WAYPOINT_CLEARANCE: f64 = 0.25;
const ESCAPE_OFFSET: f64 = 0.3;
const ESCAPE_TRIGGER: f64 = 0.15;
const GOAL_GAIN: f64 = 0.02;
const WAYPOINT_GAIN: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointMassLayout {
    Corridor,
    Collar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassState {
    pub position: [f64; 2],
    /// Last applied command, in units of the maximum speed.
    pub velocity: [f64; 2],
    pub t: usize,
    pub outcome: Outcome,
    /// Side of the obstacle on which the agent first passed its center: +1 above, −1 below, 0 not yet.
    pub crossed: i8,
    /// Mode the demonstrator follows this episode (+1 correct, −1 wrong).
    pub scripted_side: i8,
    pub wrong_mode: bool,
}

#[derive(Debug, Clone)]
pub struct PointMass {
    layout: PointMassLayout,
    state: PointMassState,
}

impl PointMass {
    pub fn new(layout: PointMassLayout) -> Self {
        Self {
            layout,
            state: PointMassState {
                position: [-0.5, 0.0],
                velocity: [0.0, 0.0],
                t: 0,
                outcome: Outcome::None,
                crossed: 0,
                scripted_side: 1,
                wrong_mode: false,
            },
        }
    }

    pub fn layout(&self) -> PointMassLayout {
        self.layout
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            task: match self.layout {
                PointMassLayout::Corridor => TaskKind::ReachChunk,
                PointMassLayout::Collar => TaskKind::CollarFlip,
            },
            obs_dim: OBS_DIM,
            action_space: ActionSpace::Continuous {
                dim: ACTION_DIM,
                horizon: HORIZON,
            },
            max_steps: MAX_STEPS,
            step_duration: STEP_DURATION,
        }
    }

    pub fn state(&self) -> &PointMassState {
        &self.state
    }

    pub fn set_position(&mut self, position: [f64; 2]) {
        self.state.position = position;
        self.state.velocity = [0.0, 0.0];
        self.state.outcome = Outcome::None;
    }

    /// Mean of the standard start distribution.
    pub fn standard_start_mean(&self) -> [f64; 2] {
        match self.layout {
            PointMassLayout::Corridor => [-0.5, 0.0],
            PointMassLayout::Collar => [-0.55, 0.075],
        }
    }

    /// Half-widths of the uniform standard start box around its mean.
    pub fn standard_start_half_widths(&self) -> [f64; 2] {
        match self.layout {
            PointMassLayout::Corridor => [0.05, 0.03],
            PointMassLayout::Collar => [0.03, 0.045],
        }
    }

    /// Membership in the designated hard-start region.
    pub fn in_hard_start_region(&self, p: [f64; 2]) -> bool {
        match self.layout {
            PointMassLayout::Corridor => {
                (-0.55..=-0.45).contains(&p[0]) && (0.03..=0.045).contains(&p[1].abs())
            }
            PointMassLayout::Collar => {
                (-0.58..=-0.52).contains(&p[0]) && (-0.12..=-0.03).contains(&p[1])
            }
        }
    }

    pub fn reset(&mut self, seed: u64, init: InitSet) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = self.standard_start_mean();
        let half = self.standard_start_half_widths();
        let position = match (self.layout, init) {
            (_, InitSet::Standard) => [
                mean[0] + rng.random_range(-half[0]..half[0]),
                mean[1] + rng.random_range(-half[1]..half[1]),
            ],
            (PointMassLayout::Corridor, InitSet::Adversarial) => {
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                [
                    -0.5 + rng.random_range(-0.05..0.05),
                    side * rng.random_range(0.03..0.045),
                ]
            }
            (PointMassLayout::Collar, InitSet::Adversarial) => [
                -0.55 + rng.random_range(-0.03..0.03),
                rng.random_range(-0.12..-0.03),
            ],
        };
        let flawed = self.layout == PointMassLayout::Collar
            && init == InitSet::Adversarial
            && rng.random::<f64>() < FLAWED_FRACTION;
        self.state = PointMassState {
            position,
            velocity: [0.0, 0.0],
            t: 0,
            outcome: Outcome::None,
            crossed: 0,
            scripted_side: if flawed { -1 } else { 1 },
            wrong_mode: false,
        };
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        let mut f = vec![0.0; OBS_DIM];
        f[0] = s.position[0];
        f[1] = s.position[1];
        f[2] = s.velocity[0];
        f[3] = s.velocity[1];
        f[4] = -s.position[0];
        f[5] = -s.position[1];
        f[6] = s.t as f64 / MAX_STEPS as f64;
        if self.layout == PointMassLayout::Collar {
            f[7] = OBSTACLE_CENTER[0] - s.position[0];
            f[8] = OBSTACLE_CENTER[1] - s.position[1];
            f[9] = s.crossed as f64;
        }
        Observation {
            features: f,
            t: s.t,
        }
    }

    /// Signed distance to the nearest failure region (negative inside).
    pub fn distance_to_failure(&self, p: [f64; 2]) -> f64 {
        let back = match self.layout {
            PointMassLayout::Corridor => CORRIDOR_BACK_EDGE,
            PointMassLayout::Collar => COLLAR_BACK_EDGE,
        };
        let mut d = (back - p[0]).min(1.0 - p[0].abs().max(p[1].abs()));
        match self.layout {
            PointMassLayout::Corridor => {
                for wall in [
                    (CORRIDOR_X, (CORRIDOR_HALF_WIDTH, f64::INFINITY)),
                    (CORRIDOR_X, (f64::NEG_INFINITY, -CORRIDOR_HALF_WIDTH)),
                ] {
                    d = d.min(rect_signed_distance(p, wall.0, wall.1));
                }
            }
            PointMassLayout::Collar => {
                let dx = p[0] - OBSTACLE_CENTER[0];
                let dy = p[1] - OBSTACLE_CENTER[1];
                d = d.min((dx * dx + dy * dy).sqrt() - OBSTACLE_RADIUS);
            }
        }
        d
    }

    pub fn failure_distance(&self) -> f64 {
        self.distance_to_failure(self.state.position)
    }

    pub fn step(&mut self, chunk: &ActionChunk) -> Result<StepResult> {
        if self.state.outcome != Outcome::None {
            return Err(EnvError::StepAfterTerminal);
        }
        let commands = match chunk {
            ActionChunk::Continuous {
                horizon,
                dim,
                commands,
            } if *dim == ACTION_DIM && *horizon >= 1 && *horizon <= HORIZON => commands,
            _ => return Err(EnvError::BadAction(format!("{chunk:?}"))),
        };
        self.state.t += 1;
        for u in commands.chunks_exact(ACTION_DIM) {
            let u = [u[0].clamp(-1.0, 1.0), u[1].clamp(-1.0, 1.0)];
            let prev = self.state.position;
            let p = [prev[0] + SUB_STEP * u[0], prev[1] + SUB_STEP * u[1]];
            self.state.position = p;
            self.state.velocity = u;
            if self.layout == PointMassLayout::Collar
                && self.state.crossed == 0
                && prev[0] < OBSTACLE_CENTER[0]
                && p[0] >= OBSTACLE_CENTER[0]
            {
                self.state.crossed = if p[1] >= OBSTACLE_CENTER[1] { 1 } else { -1 };
            }
            if self.distance_to_failure(p) < 0.0 {
                self.state.outcome = Outcome::Failure;
                break;
            }
            let speed = (u[0] * u[0] + u[1] * u[1]).sqrt() * SUB_STEP * HORIZON as f64;
            if (p[0] * p[0] + p[1] * p[1]).sqrt() < GOAL_RADIUS && speed < SPEED_LIMIT {
                if self.layout == PointMassLayout::Collar && self.state.crossed != 1 {
                    self.state.wrong_mode = true;
                    self.state.outcome = Outcome::Failure;
                } else {
                    self.state.outcome = Outcome::Success;
                }
                break;
            }
        }
        if self.state.outcome == Outcome::None && self.state.t >= MAX_STEPS {
            self.state.outcome = Outcome::Failure;
        }
        Ok(StepResult {
            observation: self.observe(),
            terminal: self.state.outcome != Outcome::None,
            outcome: self.state.outcome,
        })
    }

    /// Scripted expert chunk. `follow_script` makes CollarFlip use the
    /// episode's scripted mode instead of the correct one.
    pub fn expert_action<R: Rng + ?Sized>(
        &self,
        noise: f64,
        rng: &mut R,
        follow_script: bool,
    ) -> ActionChunk {
        if noise > 0.0 && rng.random::<f64>() < noise {
            let u = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            return ActionChunk::constant(HORIZON, &u);
        }
        let side = if follow_script {
            self.state.scripted_side
        } else {
            1
        };
        self.planned_chunk(side)
    }

    /// Open-loop rollout of the expert controller over one chunk.
    fn planned_chunk(&self, side: i8) -> ActionChunk {
        let mut q = self.state.position;
        let mut crossed = self.state.crossed;
        let mut commands = Vec::with_capacity(HORIZON * ACTION_DIM);
        for _ in 0..HORIZON {
            let (target, gain) = self.expert_target(q, crossed, side);
            let mut u = [(target[0] - q[0]) / gain, (target[1] - q[1]) / gain];
            let n = (u[0] * u[0] + u[1] * u[1]).sqrt();
            if n > 1.0 {
                u = [u[0] / n, u[1] / n];
            }
            let next = [q[0] + SUB_STEP * u[0], q[1] + SUB_STEP * u[1]];
            if crossed == 0 && q[0] < OBSTACLE_CENTER[0] && next[0] >= OBSTACLE_CENTER[0] {
                crossed = if next[1] >= 0.0 { 1 } else { -1 };
            }
            q = next;
            commands.extend_from_slice(&u);
        }
        ActionChunk::continuous(HORIZON, ACTION_DIM, commands)
    }

    fn expert_target(&self, q: [f64; 2], crossed: i8, side: i8) -> ([f64; 2], f64) {
        let goal = ([0.0, 0.0], GOAL_GAIN);
        if self.layout == PointMassLayout::Corridor || crossed != 0 {
            return goal;
        }
        let side = side as f64;
        let c = OBSTACLE_CENTER;
        if q[0] >= c[0] - 0.02 && (q[1] - c[1]) * side > 0.0 {
            return goal;
        }
        let waypoint = [c[0], c[1] + side * (OBSTACLE_RADIUS + WAYPOINT_CLEARANCE)];
        if q[0] < c[0] && segment_distance(q, waypoint, c) < OBSTACLE_RADIUS + ESCAPE_TRIGGER {
            return (
                [c[0] - OBSTACLE_RADIUS - ESCAPE_OFFSET, c[1]],
                WAYPOINT_GAIN,
            );
        }
        (waypoint, WAYPOINT_GAIN)
    }
}

fn rect_signed_distance(p: [f64; 2], xr: (f64, f64), yr: (f64, f64)) -> f64 {
    let dx = (xr.0 - p[0]).max(p[0] - xr.1);
    let dy = (yr.0 - p[1]).max(p[1] - yr.1);
    if dx <= 0.0 && dy <= 0.0 {
        dx.max(dy)
    } else {
        (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
    }
}

fn segment_distance(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((c[0] - a[0]) * ab[0] + (c[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let proj = [a[0] + t * ab[0] - c[0], a[1] + t * ab[1] - c[1]];
    (proj[0] * proj[0] + proj[1] * proj[1]).sqrt()
}
