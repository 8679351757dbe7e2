//! Deterministic 2-D occupancy-grid PointGoal environment.

mod env;
mod generate;
mod grid;
mod observe;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use env::{
    generate_episode, step, wrap_angle, wrap_heading, Action, AgentState, Episode, EpisodeSpec,
    Pose, ReplayRecord, SimConfig, StepOutcome, TWO_PI,
};
pub use generate::{is_connected, MapGenerator};
pub use grid::{geodesic_distance, GeodesicField, GridWorld, DEFAULT_CELL_SIZE};
pub use observe::{render_observation, Observation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid action index {0}")]
    InvalidAction(usize),
    #[error("position ({x:.3}, {y:.3}) is inside a blocked cell")]
    BlockedQuery { x: f64, y: f64 },
    #[error("map rejected: {0}")]
    MapRejected(String),
    #[error("map format: {0}")]
    MapFormat(String),
    #[error("environment invariant violated: {0}")]
    Invariant(String),
    #[error("episode already finished")]
    EpisodeDone,
}

/// A set of maps addressed by global id.
#[derive(Debug, Clone)]
pub struct MapSet {
    pub ids: Vec<usize>,
    pub worlds: Vec<Arc<GridWorld>>,
}

impl MapSet {
    pub fn new(ids: Vec<usize>, worlds: Vec<GridWorld>) -> Self {
        assert_eq!(ids.len(), worlds.len());
        Self {
            ids,
            worlds: worlds.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn world(&self, map_id: usize) -> Option<&Arc<GridWorld>> {
        self.ids
            .iter()
            .position(|&i| i == map_id)
            .map(|p| &self.worlds[p])
    }
}

/// Serializable snapshot of a [`NavEnv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavEnvState {
    pub spec: EpisodeSpec,
    pub state: AgentState,
    pub done: bool,
    pub episodes_started: u64,
    pub rng: ChaCha8Rng,
}

/// One environment instance that samples episodes from a map set and
/// auto-generates new episodes on reset.
#[derive(Debug, Clone)]
pub struct NavEnv {
    maps: MapSet,
    cfg: SimConfig,
    episode: Episode,
    state: AgentState,
    done: bool,
    episodes_started: u64,
    rng: ChaCha8Rng,
}

impl NavEnv {
    pub fn new(maps: MapSet, cfg: SimConfig, seed: u64) -> Result<Self, SimError> {
        if maps.is_empty() {
            return Err(SimError::MapRejected("empty map set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let episode = Self::sample(&maps, &cfg, &mut rng)?;
        let state = episode.initial_state();
        Ok(Self {
            maps,
            cfg,
            episode,
            state,
            done: false,
            episodes_started: 1,
            rng,
        })
    }

    fn sample(maps: &MapSet, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Episode, SimError> {
        let pick = rng.random_range(0..maps.len());
        let seed = rng.random::<u64>();
        let world = maps.worlds[pick].clone();
        let spec = generate_episode(&world, maps.ids[pick], seed, cfg)?;
        Episode::new(world, spec)
    }

    pub fn reset(&mut self) -> Result<(), SimError> {
        self.episode = Self::sample(&self.maps, &self.cfg, &mut self.rng)?;
        self.state = self.episode.initial_state();
        self.done = false;
        self.episodes_started += 1;
        Ok(())
    }

    pub fn observe(&self) -> Observation {
        render_observation(&self.state, &self.episode.world, self.cfg.view_size)
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        let out = step(&self.state, &self.episode, action, &self.cfg)?;
        self.state = out.state;
        self.done = out.done;
        Ok(out)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn episodes_started(&self) -> u64 {
        self.episodes_started
    }

    pub fn snapshot(&self) -> NavEnvState {
        NavEnvState {
            spec: self.episode.spec.clone(),
            state: self.state,
            done: self.done,
            episodes_started: self.episodes_started,
            rng: self.rng.clone(),
        }
    }

    pub fn restore(maps: MapSet, cfg: SimConfig, snap: NavEnvState) -> Result<Self, SimError> {
        let world = maps
            .world(snap.spec.map_id)
            .cloned()
            .ok_or_else(|| SimError::MapRejected(format!("unknown map {}", snap.spec.map_id)))?;
        let episode = Episode::new(world, snap.spec)?;
        Ok(Self {
            maps,
            cfg,
            episode,
            state: snap.state,
            done: snap.done,
            episodes_started: snap.episodes_started,
            rng: snap.rng,
        })
    }
}
