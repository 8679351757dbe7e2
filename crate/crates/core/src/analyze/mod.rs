//! Evaluation and analysis: Success/SPL, learning-curve AuC, belief masking,
//! attention/action statistics, attention maps and paired comparisons.

mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Agent;
use crate::nn::NnError;
use crate::parallel::{par_map, ExecMode};
use crate::sim::{
    generate_episode, step, Action, Episode, EpisodeSpec, GridWorld, MapSet, SimConfig, SimError,
};

pub use stats::{mean_ci, paired_t_test, select_best, ConfidenceInterval, PairedTest};

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, AnalyzeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub map_id: usize,
    pub success: bool,
    pub agent_path_length: f64,
    pub shortest_geodesic: f64,
    pub steps: usize,
    /// Per-step fusion weights, actions and positions; empty unless traces
    /// were requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positions: Vec<(f64, f64)>,
}

/// `success · shortest / max(path, shortest)`.
pub fn spl(r: &EpisodeResult) -> Result<f64> {
    if !(r.shortest_geodesic > 0.0) {
        return Err(AnalyzeError::Domain(format!(
            "shortest path {} must be positive",
            r.shortest_geodesic
        )));
    }
    if r.agent_path_length < 0.0 {
        return Err(AnalyzeError::Domain("negative path length".into()));
    }
    Ok(if r.success {
        r.shortest_geodesic / r.agent_path_length.max(r.shortest_geodesic)
    } else {
        0.0
    })
}

/// `(frames, metric)` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<(f64, f64)>,
}

impl LearningCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    /// Reads `frames,value` rows (with a header) from CSV text.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| AnalyzeError::Input(e.to_string()))?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| AnalyzeError::Input(format!("missing column {i}")))?
                    .trim()
                    .parse()
                    .map_err(|e| AnalyzeError::Input(format!("{e}")))
            };
            points.push((parse(0)?, parse(1)?));
        }
        Ok(Self { points })
    }
}

/// Trapezoidal area after mapping frames onto [0, 1].
pub fn auc(curve: &LearningCurve) -> Result<f64> {
    let p = &curve.points;
    if p.len() < 2 {
        return Err(AnalyzeError::Input("AuC needs at least two points".into()));
    }
    if p.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(AnalyzeError::Input("frames must be strictly increasing".into()));
    }
    let (x0, x1) = (p[0].0, p[p.len() - 1].0);
    let span = x1 - x0;
    Ok(p.windows(2)
        .map(|w| (w[1].0 - w[0].0) / span * 0.5 * (w[0].1 + w[1].1))
        .sum())
}

/// Who picks the actions during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Agent(&'a Agent),
    /// Uniform over the four actions.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Argmax actions; otherwise each seed samples its own run.
    pub greedy: bool,
    pub seeds: Vec<u64>,
    pub record_traces: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            greedy: false,
            seeds: vec![0, 1, 2],
            record_traces: false,
        }
    }
}

/// Runs one episode to termination.
pub fn run_episode(
    policy: Policy<'_>,
    episode: &Episode,
    sim: &SimConfig,
    mask: Option<&[bool]>,
    rng: Option<&mut ChaCha8Rng>,
    record: bool,
) -> Result<EpisodeResult> {
    let mut state = episode.initial_state();
    let mut rng = rng;
    let mut beliefs = match policy {
        Policy::Agent(a) => Some(a.initial_beliefs()),
        Policy::Random => None,
    };
    let mut res = EpisodeResult {
        map_id: episode.spec.map_id,
        success: false,
        agent_path_length: 0.0,
        shortest_geodesic: episode.spec.shortest_geodesic,
        steps: 0,
        attention: Vec::new(),
        actions: Vec::new(),
        positions: Vec::new(),
    };
    let mut first = true;
    loop {
        let (action, weights) = match (policy, beliefs.as_mut()) {
            (Policy::Agent(agent), Some(b)) => {
                let obs = crate::sim::render_observation(&state, &episode.world, sim.view_size);
                let out = agent.act(&obs, b, first, mask, rng.as_deref_mut())?;
                let w = out.beliefs.weights.clone();
                *b = out.beliefs;
                (out.action, w)
            }
            _ => {
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| AnalyzeError::Config("random policy needs a seed".into()))?;
                (Action::ALL[r.random_range(0..Action::COUNT)], Vec::new())
            }
        };
        first = false;
        if record {
            res.positions.push(state.position);
            res.actions.push(action.index());
            res.attention.push(weights);
        }
        let out = step(&state, episode, action, sim)?;
        state = out.state;
        if out.done {
            res.success = out.success;
            break;
        }
    }
    res.agent_path_length = state.path_length;
    res.steps = state.steps_elapsed;
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mask: Option<Vec<bool>>,
    pub success: f64,
    pub spl: f64,
    pub success_ci: ConfidenceInterval,
    pub spl_ci: ConfidenceInterval,
    /// `(success, spl)` per evaluation run.
    pub runs: Vec<(f64, f64)>,
    pub results: Vec<Vec<EpisodeResult>>,
}

impl EvalSummary {
    /// Per-episode SPL averaged over runs, in episode order; used for
    /// paired comparisons.
    pub fn per_episode_spl(&self) -> Vec<f64> {
        per_episode(&self.results, |r| spl(r).unwrap_or(0.0))
    }

    pub fn per_episode_success(&self) -> Vec<f64> {
        per_episode(&self.results, |r| if r.success { 1.0 } else { 0.0 })
    }
}

fn per_episode(runs: &[Vec<EpisodeResult>], f: impl Fn(&EpisodeResult) -> f64) -> Vec<f64> {
    let n = runs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| runs.iter().map(|r| f(&r[i])).sum::<f64>() / runs.len() as f64)
        .collect()
}

/// Evaluates a policy on a fixed episode set. Greedy agents run once; any
/// sampling policy runs once per seed and the runs are averaged.
pub fn evaluate(
    policy: Policy<'_>,
    episodes: &[Episode],
    mask: Option<&[bool]>,
    sim: &SimConfig,
    cfg: &EvalConfig,
    mode: ExecMode,
) -> Result<EvalSummary> {
    if let (Some(m), Policy::Agent(a)) = (mask, policy) {
        if a.module_count() == 1 {
            return Err(AnalyzeError::Config("masking needs a multi-belief agent".into()));
        }
        if m.len() != a.module_count() {
            return Err(AnalyzeError::Config(format!(
                "mask has {} flags for {} modules",
                m.len(),
                a.module_count()
            )));
        }
    }
    if episodes.is_empty() {
        return Err(AnalyzeError::Input("empty episode set".into()));
    }
    let greedy = cfg.greedy && matches!(policy, Policy::Agent(_));
    let seeds: Vec<u64> = if greedy {
        vec![0]
    } else if cfg.seeds.is_empty() {
        return Err(AnalyzeError::Config("sampling evaluation needs at least one seed".into()));
    } else {
        cfg.seeds.clone()
    };
    let mut results = Vec::new();
    for &seed in &seeds {
        let jobs: Vec<usize> = (0..episodes.len()).collect();
        let run = par_map(mode, jobs, |i| {
            let ep = &episodes[i];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ep.spec.rng_seed.rotate_left(17) ^ i as u64);
            run_episode(
                policy,
                ep,
                sim,
                mask,
                if greedy { None } else { Some(&mut rng) },
                cfg.record_traces,
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        results.push(run);
    }
    let runs: Vec<(f64, f64)> = results
        .iter()
        .map(|r| {
            let n = r.len() as f64;
            (
                r.iter().filter(|x| x.success).count() as f64 / n,
                r.iter().map(|x| spl(x).unwrap_or(0.0)).sum::<f64>() / n,
            )
        })
        .collect();
    let summary = EvalSummary {
        episodes: episodes.len(),
        mask: mask.map(<[bool]>::to_vec),
        success: runs.iter().map(|r| r.0).sum::<f64>() / runs.len() as f64,
        spl: runs.iter().map(|r| r.1).sum::<f64>() / runs.len() as f64,
        success_ci: ConfidenceInterval::default(),
        spl_ci: ConfidenceInterval::default(),
        runs,
        results,
    };
    Ok(EvalSummary {
        success_ci: mean_ci(&summary.per_episode_success()),
        spl_ci: mean_ci(&summary.per_episode_spl()),
        ..summary
    })
}

/// Builds `count` episodes over a map set, cycling through the maps.
pub fn episode_set(maps: &MapSet, count: usize, seed: u64, sim: &SimConfig) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let p = i % maps.len();
            let world = maps.worlds[p].clone();
            let spec = generate_episode(&world, maps.ids[p], rng.random(), sim)?;
            Ok(Episode::new(world, spec)?)
        })
        .collect()
}

/// Rebuilds episodes from stored specs.
pub fn episodes_from_specs(maps: &MapSet, specs: &[EpisodeSpec]) -> Result<Vec<Episode>> {
    specs
        .iter()
        .map(|s| {
            let w = maps
                .world(s.map_id)
                .ok_or_else(|| AnalyzeError::Input(format!("episode refers to unknown map {}", s.map_id)))?;
            Ok(Episode::new(w.clone(), s.clone())?)
        })
        .collect()
}

/// Index of the largest weight, lowest index on ties.
pub fn argmax_module(w: &[f64]) -> usize {
    crate::auxiliary::argmax(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionActionTable {
    /// `by_module[m][a]`: steps where module `m` had the most attention and
    /// action `a` was taken.
    pub by_module: Vec<[u64; Action::COUNT]>,
    /// `by_action[a][m]`: steps with action `a` where module `m` had weight
    /// above the threshold.
    pub by_action: [Vec<u64>; Action::COUNT],
    pub threshold: f64,
}

pub const ATTENTION_THRESHOLD: f64 = 0.25;

pub fn attention_action_table(results: &[EpisodeResult], modules: usize) -> Result<AttentionActionTable> {
    let mut by_module = vec![[0u64; Action::COUNT]; modules];
    let mut by_action: [Vec<u64>; Action::COUNT] = std::array::from_fn(|_| vec![0; modules]);
    for r in results {
        if r.attention.len() != r.actions.len() {
            return Err(AnalyzeError::Input("results carry no attention trace".into()));
        }
        for (w, &a) in r.attention.iter().zip(&r.actions) {
            if w.len() != modules || a >= Action::COUNT {
                return Err(AnalyzeError::Input(format!(
                    "trace step with {} weights and action {a}",
                    w.len()
                )));
            }
            by_module[argmax_module(w)][a] += 1;
            for (m, &x) in w.iter().enumerate() {
                if x > ATTENTION_THRESHOLD {
                    by_action[a][m] += 1;
                }
            }
        }
    }
    Ok(AttentionActionTable {
        by_module,
        by_action,
        threshold: ATTENTION_THRESHOLD,
    })
}

/// Per-cell label of the most-attended module; `-1` where no trajectory
/// passed. Later visits overwrite earlier ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<i64>,
    pub skipped: usize,
}

impl LabelGrid {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![-1; width * height],
            skipped: 0,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> i64 {
        self.labels[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l < 0)
    }

    /// `width height` header, then one line per grid row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|x| self.get(x, y).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Rolls out trajectories from random spawns toward a fixed goal cell and
/// labels every visited cell with the module holding the most attention.
pub fn export_attention_map(
    agent: &Agent,
    world: &GridWorld,
    n_spawns: usize,
    goal: (usize, usize),
    sim: &SimConfig,
    seed: u64,
    greedy: bool,
) -> Result<LabelGrid> {
    if world.is_blocked(goal.0, goal.1) {
        return Err(AnalyzeError::Input(format!("goal cell {goal:?} is blocked")));
    }
    let mut grid = LabelGrid::empty(world.width(), world.height());
    if n_spawns == 0 {
        return Ok(grid);
    }
    let world = std::sync::Arc::new(world.clone());
    let field = world.geodesic_field(goal)?;
    let goal_xy = world.cell_center(goal.0, goal.1);
    let free = world.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_spawns {
        let cell = free[rng.random_range(0..free.len())];
        let heading = rng.random_range(0.0..crate::sim::TWO_PI);
        let d = field.at_cell(cell.0, cell.1);
        if cell == goal || !d.is_finite() {
            grid.skipped += 1;
            continue;
        }
        let (x, y) = world.cell_center(cell.0, cell.1);
        let spec = EpisodeSpec {
            map_id: 0,
            start: crate::sim::Pose { x, y, heading },
            goal: goal_xy,
            shortest_geodesic: d,
            max_steps: sim.max_steps,
            rng_seed: rng.random(),
        };
        let ep = Episode::new(world.clone(), spec)?;
        let mut ep_rng = ChaCha8Rng::seed_from_u64(ep.spec.rng_seed);
        let r = run_episode(
            Policy::Agent(agent),
            &ep,
            sim,
            None,
            if greedy { None } else { Some(&mut ep_rng) },
            true,
        )?;
        for (pos, w) in r.positions.iter().zip(&r.attention) {
            let (cx, cy) = world.cell_of(pos.0, pos.1);
            if !world.is_blocked_signed(cx, cy) {
                grid.labels[cy as usize * grid.width + cx as usize] = argmax_module(w) as i64;
            }
        }
    }
    Ok(grid)
}
