//! PPO with GAE over parallel rollout workers, jointly optimizing the RL
//! objective, the action-entropy bonus and the auxiliary losses.

mod metrics;
mod ppo;
mod rollout;
pub mod variants;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig};
use crate::analyze::{self, auc, episode_set, AnalyzeError, EvalConfig, LearningCurve, Policy};
use crate::nn::NnError;
use crate::parallel::ExecMode;
use crate::sim::{Episode, GridWorld, MapGenerator, MapSet, NavEnv, SimConfig, SimError};

pub use metrics::{MetricRow, MetricsWriter, UpdateMetrics, ValidationMetrics};
pub use ppo::{compute_gae, minibatch_loss, normalize, ppo_update, LossBreakdown, Minibatch, PpoConfig};
pub use rollout::{collect_rollouts, FinishedEpisode, Rollout, Worker, WorkerState};
pub use variants::{random_policy_success, run_variant, AuxBetas, DeskScale, Variant, VariantRun};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("worker {worker} step {step}: {source}")]
    Sim {
        worker: usize,
        step: usize,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Map(#[from] SimError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error("non-finite loss in minibatch {minibatch}: {detail}")]
    NonFinite { minibatch: usize, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// SplitMix64 step; derives independent stream seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fixed procedural suite: map `i` comes from `generators[i % len]`, the
/// last `heldout` maps are reserved for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSuiteConfig {
    pub generators: Vec<MapGenerator>,
    pub count: usize,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for MapSuiteConfig {
    fn default() -> Self {
        Self {
            generators: vec![
                MapGenerator::Open {
                    width: 10,
                    height: 10,
                },
                MapGenerator::Clutter {
                    width: 10,
                    height: 10,
                    density: 0.1,
                },
                MapGenerator::Rooms {
                    width: 12,
                    height: 10,
                    walls: 1,
                },
                MapGenerator::Maze {
                    cells_x: 3,
                    cells_y: 3,
                    corridor: 2,
                },
            ],
            count: 16,
            heldout: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapSuite {
    pub train: MapSet,
    pub heldout: MapSet,
}

impl MapSuiteConfig {
    pub fn build(&self) -> Result<MapSuite> {
        if self.generators.is_empty() || self.heldout == 0 || self.heldout >= self.count {
            return Err(TrainError::Config(format!(
                "suite of {} maps with {} held out",
                self.count, self.heldout
            )));
        }
        let worlds = (0..self.count)
            .map(|i| self.generators[i % self.generators.len()].generate(derive_seed(self.seed, i as u64)))
            .collect::<std::result::Result<Vec<GridWorld>, _>>()?;
        let split = self.count - self.heldout;
        let mut worlds = worlds;
        let held = worlds.split_off(split);
        let suite = MapSuite {
            train: MapSet::new((0..split).collect(), worlds),
            heldout: MapSet::new((split..self.count).collect(), held),
        };
        suite.assert_disjoint()?;
        Ok(suite)
    }
}

impl MapSuite {
    pub fn assert_disjoint(&self) -> Result<()> {
        match self.train.ids.iter().find(|i| self.heldout.ids.contains(i)) {
            Some(i) => Err(TrainError::Config(format!("map {i} is in both train and held-out sets"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Frames between validations; 0 disables validation.
    pub every_frames: u64,
    pub episodes: usize,
    pub seed: u64,
    pub eval: EvalConfig,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            every_frames: 0,
            episodes: 32,
            seed: 7,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub maps: MapSuiteConfig,
    #[serde(default)]
    pub sim: SimConfig,
    pub agent: AgentConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    pub total_frames: u64,
    /// Frames between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub exec: ExecMode,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate().map_err(TrainError::Config)?;
        self.agent.validate().map_err(TrainError::Config)?;
        if self.agent.encoder.view_size != self.sim.view_size {
            return Err(TrainError::Config(format!(
                "encoder view {} != simulator view {}",
                self.agent.encoder.view_size, self.sim.view_size
            )));
        }
        Ok(())
    }

    /// Reads TOML or JSON by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.into(),
            source,
        })?;
        let bad = |detail: String| TrainError::Config(format!("{}: {detail}", path.display()));
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub count: u64,
    pub mean: f64,
}

impl RunningMean {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub frames: u64,
    pub updates: u64,
    pub rng: ChaCha8Rng,
    pub workers: Vec<WorkerState>,
    pub episode_returns: RunningMean,
    pub validation: Vec<ValidationMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub experiment: ExperimentConfig,
    pub agent: Agent,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| TrainError::Checkpoint {
            path: path.into(),
            detail: e.to_string(),
        })?;
        let tmp = path.with_extension("tmp");
        let io = |source| TrainError::Io {
            path: path.into(),
            source,
        };
        std::fs::write(&tmp, json).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Loads and checks that the stored parameters fit the stored
    /// architecture.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.into(),
            source,
        })?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
            path: path.into(),
            detail: e.to_string(),
        })?;
        let fresh = Agent::new(ck.agent.config.clone())?;
        if !fresh.same_layout(&ck.agent) {
            return Err(TrainError::Checkpoint {
                path: path.into(),
                detail: "parameters do not match the architecture".into(),
            });
        }
        Ok(ck)
    }
}

pub struct Trainer {
    pub experiment: ExperimentConfig,
    pub agent: Agent,
    pub workers: Vec<Worker>,
    pub suite: MapSuite,
    pub validation_episodes: Vec<Episode>,
    pub rng: ChaCha8Rng,
    pub frames: u64,
    pub updates: u64,
    pub episode_returns: RunningMean,
    pub validation: Vec<ValidationMetrics>,
    pub metrics: Vec<MetricRow>,
    writer: Option<MetricsWriter>,
}

const STREAM_AGENT: u64 = 1;
const STREAM_TRAINER: u64 = 2;
const STREAM_ENV: u64 = 100;
const STREAM_ACTIONS: u64 = 200;

impl Trainer {
    pub fn new(experiment: ExperimentConfig) -> Result<Self> {
        experiment.validate()?;
        let seed = experiment.seed;
        let mut agent_cfg = experiment.agent.clone();
        agent_cfg.seed = derive_seed(seed, STREAM_AGENT);
        let agent = Agent::new(agent_cfg)?;
        let suite = experiment.maps.build()?;
        let workers = (0..experiment.ppo.workers)
            .map(|b| {
                let env = NavEnv::new(
                    suite.train.clone(),
                    experiment.sim,
                    derive_seed(seed, STREAM_ENV + b as u64),
                )?;
                Ok(Worker::new(env, &agent, derive_seed(seed, STREAM_ACTIONS + b as u64)))
            })
            .collect::<Result<Vec<_>>>()?;
        let validation_episodes = Self::validation_set(&experiment, &suite)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRAINER)),
            experiment,
            agent,
            workers,
            suite,
            validation_episodes,
            frames: 0,
            updates: 0,
            episode_returns: RunningMean::default(),
            validation: Vec::new(),
            metrics: Vec::new(),
            writer: None,
        })
    }

    fn validation_set(exp: &ExperimentConfig, suite: &MapSuite) -> Result<Vec<Episode>> {
        let eps = episode_set(&suite.heldout, exp.validation.episodes.max(1), exp.validation.seed, &exp.sim)?;
        if eps.iter().any(|e| suite.train.ids.contains(&e.spec.map_id)) {
            return Err(TrainError::Config("validation episode on a training map".into()));
        }
        Ok(eps)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let exp = ck.experiment;
        exp.validate()?;
        let suite = exp.maps.build()?;
        if ck.state.workers.len() != exp.ppo.workers {
            return Err(TrainError::Config("checkpoint worker count differs from config".into()));
        }
        let workers = ck
            .state
            .workers
            .into_iter()
            .map(|w| {
                Ok(Worker {
                    env: NavEnv::restore(suite.train.clone(), exp.sim, w.env)?,
                    beliefs: w.beliefs,
                    needs_reset: w.needs_reset,
                    rng: w.rng,
                    episode_return: w.episode_return,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let validation_episodes = Self::validation_set(&exp, &suite)?;
        Ok(Self {
            experiment: exp,
            agent: ck.agent,
            workers,
            suite,
            validation_episodes,
            rng: ck.state.rng,
            frames: ck.state.frames,
            updates: ck.state.updates,
            episode_returns: ck.state.episode_returns,
            validation: ck.state.validation,
            metrics: Vec::new(),
            writer: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            experiment: self.experiment.clone(),
            agent: self.agent.clone(),
            state: TrainState {
                frames: self.frames,
                updates: self.updates,
                rng: self.rng.clone(),
                workers: self.workers.iter().map(Worker::snapshot).collect(),
                episode_returns: self.episode_returns,
                validation: self.validation.clone(),
            },
        }
    }

    /// Streams metric rows to `path` as CSV. When resuming, rows past the
    /// current frame count are dropped first so the file matches an
    /// uninterrupted run.
    pub fn attach_metrics(&mut self, path: &Path) -> Result<()> {
        self.writer = Some(MetricsWriter::open(path, &self.task_names(), self.frames)?);
        Ok(())
    }

    pub fn task_names(&self) -> Vec<String> {
        self.experiment.agent.belief.tasks.iter().map(|t| t.kind.name()).collect()
    }

    fn emit(&mut self, row: MetricRow) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.write(&row)?;
        }
        self.metrics.push(row);
        Ok(())
    }

    /// One collect + PPO update. A non-finite loss restores the previous
    /// parameters, records the failing minibatch and skips the update.
    pub fn step(&mut self) -> Result<MetricRow> {
        let cfg = self.experiment.ppo.clone();
        let rollout = collect_rollouts(&self.agent, &mut self.workers, cfg.rollout_len, self.experiment.exec)?;
        let finished = &rollout.finished;
        let train_return = if finished.is_empty() {
            None
        } else {
            Some(finished.iter().map(|e| e.ret).sum::<f64>() / finished.len() as f64)
        };
        let train_success = if finished.is_empty() {
            None
        } else {
            Some(finished.iter().filter(|e| e.success).count() as f64 / finished.len() as f64)
        };
        for e in finished {
            self.episode_returns.push(e.ret);
        }
        let before = self.agent.tape.clone();
        let outcome = ppo_update(&mut self.agent, &rollout, &cfg, &mut self.rng);
        self.frames += rollout.frames() as u64;
        self.updates += 1;
        let row = match outcome {
            Ok(loss) => MetricRow::Update(UpdateMetrics {
                frames: self.frames,
                updates: self.updates,
                loss,
                train_return,
                train_success,
                episodes: finished.len(),
            }),
            Err(TrainError::NonFinite { minibatch, detail }) => {
                self.agent.tape = before;
                MetricRow::Event {
                    frames: self.frames,
                    message: format!("update skipped: non-finite loss in minibatch {minibatch}: {detail}"),
                }
            }
            Err(e) => return Err(e),
        };
        self.emit(row.clone())?;
        Ok(row)
    }

    pub fn validate(&mut self) -> Result<ValidationMetrics> {
        let v = &self.experiment.validation;
        let s = analyze::evaluate(
            Policy::Agent(&self.agent),
            &self.validation_episodes,
            None,
            &self.experiment.sim,
            &v.eval,
            self.experiment.exec,
        )?;
        let m = ValidationMetrics {
            frames: self.frames,
            success: s.success,
            spl: s.spl,
            success_runs: s.runs.iter().map(|r| r.0).collect(),
            spl_runs: s.runs.iter().map(|r| r.1).collect(),
        };
        self.validation.push(m.clone());
        self.emit(MetricRow::Validation(m.clone()))?;
        Ok(m)
    }

    fn validation_due(&self, prev: u64) -> bool {
        let every = self.experiment.validation.every_frames;
        every > 0 && self.frames / every > prev / every
    }

    fn checkpoint_due(&self, prev: u64) -> bool {
        let every = self.experiment.checkpoint_every;
        every > 0 && self.frames / every > prev / every
    }

    pub fn checkpoint_path(&self, frames: u64) -> Option<PathBuf> {
        self.experiment
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("checkpoint_{frames:010}.json")))
    }

    /// Trains until the frame budget is spent, validating and
    /// checkpointing on schedule. A validation at frame 0 anchors the
    /// learning curve.
    pub fn run(&mut self) -> Result<()> {
        if self.frames == 0 && self.experiment.validation.every_frames > 0 && self.validation.is_empty() {
            self.validate()?;
        }
        let per = self.experiment.ppo.frames_per_update() as u64;
        while self.frames + per <= self.experiment.total_frames {
            let prev = self.frames;
            self.step()?;
            if self.validation_due(prev) {
                self.validate()?;
            }
            if self.checkpoint_due(prev) {
                self.save_checkpoint()?;
            }
        }
        if self.experiment.output_dir.is_some() {
            self.save_checkpoint()?;
        }
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&mut self) -> Result<Option<PathBuf>> {
        let Some(path) = self.checkpoint_path(self.frames) else {
            return Ok(None);
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.into(),
                source,
            })?;
        }
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        self.checkpoint().save(&path)?;
        Ok(Some(path))
    }

    /// Validation success curve over frames.
    pub fn success_curve(&self) -> LearningCurve {
        LearningCurve::new(self.validation.iter().map(|v| (v.frames as f64, v.success)).collect())
    }

    pub fn success_auc(&self) -> Result<f64> {
        Ok(auc(&self.success_curve())?)
    }
}
