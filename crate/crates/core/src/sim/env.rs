use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{GeodesicField, GridWorld};
use super::SimError;

pub const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stop,
    Forward,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [
        Action::Stop,
        Action::Forward,
        Action::TurnLeft,
        Action::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self, SimError> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(SimError::InvalidAction(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub forward_step: f64,
    pub turn_degrees: f64,
    pub success_radius: f64,
    pub success_reward: f64,
    pub slack_penalty: f64,
    pub max_steps: usize,
    pub wall_sliding: bool,
    pub view_size: usize,
    pub min_separation: f64,
    pub spawn_retries: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            forward_step: 0.25,
            turn_degrees: 10.0,
            success_radius: 0.2,
            success_reward: 2.5,
            slack_penalty: 0.01,
            max_steps: 500,
            wall_sliding: true,
            view_size: 11,
            min_separation: 1.0,
            spawn_retries: 1000,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(TWO_PI);
    if w > PI {
        w -= TWO_PI;
    }
    w
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_heading(a: f64) -> f64 {
    let w = a.rem_euclid(TWO_PI);
    if w >= TWO_PI {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: (f64, f64),
    pub heading: f64,
    pub goal: (f64, f64),
    pub steps_elapsed: usize,
    pub path_length: f64,
}

impl AgentState {
    pub fn pose(&self) -> Pose {
        Pose {
            x: self.position.0,
            y: self.position.1,
            heading: self.heading,
        }
    }

    pub fn distance_to_goal(&self) -> f64 {
        let dx = self.goal.0 - self.position.0;
        let dy = self.goal.1 - self.position.1;
        (dx * dx + dy * dy).sqrt()
    }

    /// Goal bearing relative to heading, in `(-pi, pi]`.
    pub fn goal_bearing(&self) -> f64 {
        let dx = self.goal.0 - self.position.0;
        let dy = self.goal.1 - self.position.1;
        if dx == 0.0 && dy == 0.0 {
            return 0.0;
        }
        wrap_angle(dy.atan2(dx) - self.heading)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub map_id: usize,
    pub start: Pose,
    pub goal: (f64, f64),
    pub shortest_geodesic: f64,
    pub max_steps: usize,
    pub rng_seed: u64,
}

/// Samples a start and goal uniformly among free-cell pairs that are
/// mutually reachable and at least `min_separation` apart geodesically.
pub fn generate_episode(
    world: &GridWorld,
    map_id: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<EpisodeSpec, SimError> {
    let free = world.free_cells();
    if free.len() < 2 {
        return Err(SimError::MapRejected(format!(
            "map {map_id} has {} free cells",
            free.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.spawn_retries {
        let start = free[rng.random_range(0..free.len())];
        let goal = free[rng.random_range(0..free.len())];
        let heading = rng.random_range(0.0..TWO_PI);
        if start == goal {
            continue;
        }
        let field = world.geodesic_field(goal)?;
        let d = field.at_cell(start.0, start.1);
        if d.is_finite() && d >= cfg.min_separation {
            let (sx, sy) = world.cell_center(start.0, start.1);
            return Ok(EpisodeSpec {
                map_id,
                start: Pose {
                    x: sx,
                    y: sy,
                    heading,
                },
                goal: world.cell_center(goal.0, goal.1),
                shortest_geodesic: d,
                max_steps: cfg.max_steps,
                rng_seed: seed,
            });
        }
    }
    Err(SimError::MapRejected(format!(
        "no valid start/goal pair on map {map_id} after {} attempts",
        cfg.spawn_retries
    )))
}

/// A world plus the goal's geodesic field for one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub world: Arc<GridWorld>,
    pub field: GeodesicField,
    pub spec: EpisodeSpec,
}

impl Episode {
    pub fn new(world: Arc<GridWorld>, spec: EpisodeSpec) -> Result<Self, SimError> {
        let (gx, gy) = world.cell_of(spec.goal.0, spec.goal.1);
        if world.is_blocked_signed(gx, gy) {
            return Err(SimError::BlockedQuery {
                x: spec.goal.0,
                y: spec.goal.1,
            });
        }
        let field = world.geodesic_field((gx as usize, gy as usize))?;
        Ok(Self { world, field, spec })
    }

    pub fn initial_state(&self) -> AgentState {
        AgentState {
            position: (self.spec.start.x, self.spec.start.y),
            heading: wrap_heading(self.spec.start.heading),
            goal: self.spec.goal,
            steps_elapsed: 0,
            path_length: 0.0,
        }
    }

    pub fn geodesic(&self, position: (f64, f64)) -> Result<f64, SimError> {
        self.field.query(&self.world, position.0, position.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: AgentState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// True if the straight segment between two points stays in free cells
/// without squeezing diagonally past a blocked corner.
fn segment_clear(world: &GridWorld, from: (f64, f64), to: (f64, f64)) -> bool {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let n = ((len / (world.cell_size() * 0.125)).ceil() as usize).max(1);
    let mut prev = world.cell_of(from.0, from.1);
    for i in 1..=n {
        let t = i as f64 / n as f64;
        let p = (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1));
        let cell = world.cell_of(p.0, p.1);
        if world.is_blocked_signed(cell.0, cell.1) {
            return false;
        }
        if cell.0 != prev.0
            && cell.1 != prev.1
            && (world.is_blocked_signed(cell.0, prev.1) || world.is_blocked_signed(prev.0, cell.1))
        {
            return false;
        }
        prev = cell;
    }
    true
}

fn resolve_forward(world: &GridWorld, pos: (f64, f64), dx: f64, dy: f64, sliding: bool) -> (f64, f64) {
    let full = (pos.0 + dx, pos.1 + dy);
    if segment_clear(world, pos, full) {
        return full;
    }
    if !sliding {
        return pos;
    }
    let along_x = (pos.0 + dx, pos.1);
    let along_y = (pos.0, pos.1 + dy);
    let mut options = [(dx.abs(), along_x), (dy.abs(), along_y)];
    if options[1].0 > options[0].0 {
        options.swap(0, 1);
    }
    for (mag, target) in options {
        if mag > 0.0 && segment_clear(world, pos, target) {
            return target;
        }
    }
    pos
}

/// Advances one action. Pure in `(state, episode, action, cfg)`.
pub fn step(
    state: &AgentState,
    episode: &Episode,
    action: Action,
    cfg: &SimConfig,
) -> Result<StepOutcome, SimError> {
    let world = &episode.world;
    if !world.is_free_point(state.position.0, state.position.1) {
        return Err(SimError::Invariant(format!(
            "agent at ({:.3}, {:.3}) is inside a wall",
            state.position.0, state.position.1
        )));
    }
    let mut next = *state;
    next.steps_elapsed += 1;
    if action == Action::Stop {
        let success = state.distance_to_goal() < cfg.success_radius;
        let reward = if success { cfg.success_reward } else { 0.0 };
        return Ok(StepOutcome {
            state: next,
            reward,
            done: true,
            success,
        });
    }
    let before = episode.geodesic(state.position)?;
    match action {
        Action::Forward => {
            let dx = cfg.forward_step * state.heading.cos();
            let dy = cfg.forward_step * state.heading.sin();
            let pos = resolve_forward(world, state.position, dx, dy, cfg.wall_sliding);
            let disp = ((pos.0 - state.position.0).powi(2) + (pos.1 - state.position.1).powi(2))
                .sqrt();
            next.position = pos;
            next.path_length += disp;
        }
        Action::TurnLeft => {
            next.heading = wrap_heading(state.heading + cfg.turn_degrees.to_radians());
        }
        Action::TurnRight => {
            next.heading = wrap_heading(state.heading - cfg.turn_degrees.to_radians());
        }
        Action::Stop => unreachable!(),
    }
    let after = episode.geodesic(next.position)?;
    let reward = before - after - cfg.slack_penalty;
    if !reward.is_finite() {
        return Err(SimError::Invariant(format!(
            "non-finite shaping reward ({before} -> {after})"
        )));
    }
    let done = next.steps_elapsed >= episode.spec.max_steps;
    Ok(StepOutcome {
        state: next,
        reward,
        done,
        success: false,
    })
}

/// One record of the JSON-lines replay log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub episode_id: u64,
    pub t: usize,
    pub action: Action,
    pub reward: f64,
    pub pose: Pose,
    pub done: bool,
    pub success: bool,
}
