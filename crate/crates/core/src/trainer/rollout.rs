use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::agent::{Agent, BeliefSet};
use crate::nn::Tensor;
use crate::parallel::{par_for_each_mut, ExecMode};
use crate::sim::{NavEnv, NavEnvState, Observation};

/// Summary of an episode that finished during collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinishedEpisode {
    pub worker: usize,
    pub ret: f64,
    pub steps: usize,
    pub success: bool,
    pub spl: f64,
}

/// One rollout worker: an environment, its recurrent state and its own
/// action-sampling stream.
#[derive(Debug, Clone)]
pub struct Worker {
    pub env: NavEnv,
    pub beliefs: BeliefSet,
    /// The next step begins a new episode.
    pub needs_reset: bool,
    pub rng: ChaCha8Rng,
    pub episode_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub env: NavEnvState,
    pub beliefs: BeliefSet,
    pub needs_reset: bool,
    pub rng: ChaCha8Rng,
    pub episode_return: f64,
}

impl Worker {
    pub fn new(env: NavEnv, agent: &Agent, seed: u64) -> Self {
        Self {
            env,
            beliefs: agent.initial_beliefs(),
            needs_reset: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episode_return: 0.0,
        }
    }

    pub fn snapshot(&self) -> WorkerState {
        WorkerState {
            env: self.env.snapshot(),
            beliefs: self.beliefs.clone(),
            needs_reset: self.needs_reset,
            rng: self.rng.clone(),
            episode_return: self.episode_return,
        }
    }
}

/// Everything one worker produced over `T` steps.
#[derive(Debug, Clone, Default)]
struct Track {
    ego: Vec<f64>,
    gps: Vec<f64>,
    starts: Vec<bool>,
    actions: Vec<usize>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    weights: Vec<f64>,
    h0: Vec<Vec<f64>>,
    bootstrap: f64,
    finished: Vec<FinishedEpisode>,
}

/// Time-major rollout batch: row `t * workers + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: usize,
    pub workers: usize,
    pub view_len: usize,
    pub modules: usize,
    pub ego: Vec<f64>,
    pub gps: Vec<f64>,
    /// The row's observation begins an episode; the hidden state is reset
    /// before its step.
    pub starts: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Fusion weights per row, `modules` each.
    pub weights: Vec<f64>,
    /// Hidden state per module before step 0, `[workers, hidden]`.
    pub h0: Vec<Tensor>,
    pub bootstrap: Vec<f64>,
    pub finished: Vec<FinishedEpisode>,
}

impl Rollout {
    pub fn frames(&self) -> usize {
        self.steps * self.workers
    }

    pub fn keep(&self) -> Vec<f64> {
        self.starts.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect()
    }

    /// Sub-batch over a subset of workers, preserving time order.
    pub fn select_workers(&self, cols: &[usize]) -> Rollout {
        let (t_len, b_len) = (self.steps, self.workers);
        let rows: Vec<usize> = (0..t_len)
            .flat_map(|t| cols.iter().map(move |&b| t * b_len + b))
            .collect();
        let pick = |v: &[f64], w: usize| -> Vec<f64> {
            rows.iter().flat_map(|&r| v[r * w..(r + 1) * w].iter().copied()).collect()
        };
        let h0 = self
            .h0
            .iter()
            .map(|h| {
                let cols_h = h.cols();
                let data = cols.iter().flat_map(|&b| h.row(b).to_vec()).collect();
                Tensor::from_vec(cols.len(), cols_h, data)
            })
            .collect();
        Rollout {
            steps: t_len,
            workers: cols.len(),
            view_len: self.view_len,
            modules: self.modules,
            ego: pick(&self.ego, self.view_len),
            gps: pick(&self.gps, 2),
            starts: rows.iter().map(|&r| self.starts[r]).collect(),
            actions: rows.iter().map(|&r| self.actions[r]).collect(),
            log_probs: rows.iter().map(|&r| self.log_probs[r]).collect(),
            values: rows.iter().map(|&r| self.values[r]).collect(),
            rewards: rows.iter().map(|&r| self.rewards[r]).collect(),
            dones: rows.iter().map(|&r| self.dones[r]).collect(),
            weights: pick(&self.weights, self.modules),
            h0,
            bootstrap: cols.iter().map(|&b| self.bootstrap[b]).collect(),
            finished: Vec::new(),
        }
    }
}

fn run_worker(agent: &Agent, w: &mut Worker, steps: usize, id: usize) -> Result<Track, TrainError> {
    let mut tr = Track {
        h0: w.beliefs.hidden.clone(),
        ..Track::default()
    };
    let sim_err = |step, source| TrainError::Sim {
        worker: id,
        step,
        source,
    };
    for t in 0..steps {
        let obs = w.env.observe();
        let out = agent.act(&obs, &w.beliefs, w.needs_reset, None, Some(&mut w.rng))?;
        let res = w.env.step(out.action).map_err(|e| sim_err(t, e))?;
        tr.ego.extend_from_slice(&obs.ego_view);
        tr.gps.extend_from_slice(&obs.gps_compass);
        tr.starts.push(w.needs_reset);
        tr.actions.push(out.action.index());
        tr.log_probs.push(out.log_prob);
        tr.values.push(out.policy.value);
        tr.rewards.push(res.reward);
        tr.dones.push(res.done);
        tr.weights.extend_from_slice(&out.beliefs.weights);
        w.beliefs = out.beliefs;
        w.episode_return += res.reward;
        w.needs_reset = res.done;
        if res.done {
            let ep = w.env.episode();
            let st = w.env.state();
            let shortest = ep.spec.shortest_geodesic;
            let spl = if res.success {
                shortest / st.path_length.max(shortest)
            } else {
                0.0
            };
            tr.finished.push(FinishedEpisode {
                worker: id,
                ret: w.episode_return,
                steps: st.steps_elapsed,
                success: res.success,
                spl,
            });
            w.episode_return = 0.0;
            w.env.reset().map_err(|e| sim_err(t, e))?;
        }
    }
    let obs: Observation = w.env.observe();
    let out = agent.act::<ChaCha8Rng>(&obs, &w.beliefs, w.needs_reset, None, None)?;
    tr.bootstrap = out.policy.value;
    Ok(tr)
}

/// Steps every worker `steps` times with frozen parameters. Workers are
/// independent, so the parallel and sequential modes give identical data.
pub fn collect_rollouts(
    agent: &Agent,
    workers: &mut [Worker],
    steps: usize,
    mode: ExecMode,
) -> Result<Rollout, TrainError> {
    let tracks = par_for_each_mut(mode, workers, |b, w| run_worker(agent, w, steps, b))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let b_len = tracks.len();
    let vl = Observation::view_len(agent.config.encoder.view_size);
    let n = agent.module_count();
    let h = agent.hidden_size();
    let rows = steps * b_len;
    let mut r = Rollout {
        steps,
        workers: b_len,
        view_len: vl,
        modules: n,
        ego: Vec::with_capacity(rows * vl),
        gps: Vec::with_capacity(rows * 2),
        starts: Vec::with_capacity(rows),
        actions: Vec::with_capacity(rows),
        log_probs: Vec::with_capacity(rows),
        values: Vec::with_capacity(rows),
        rewards: Vec::with_capacity(rows),
        dones: Vec::with_capacity(rows),
        weights: Vec::with_capacity(rows * n),
        h0: (0..n)
            .map(|m| {
                Tensor::from_vec(b_len, h, tracks.iter().flat_map(|tr| tr.h0[m].clone()).collect())
            })
            .collect(),
        bootstrap: tracks.iter().map(|tr| tr.bootstrap).collect(),
        finished: tracks.iter().flat_map(|tr| tr.finished.clone()).collect(),
    };
    for t in 0..steps {
        for tr in &tracks {
            r.ego.extend_from_slice(&tr.ego[t * vl..(t + 1) * vl]);
            r.gps.extend_from_slice(&tr.gps[t * 2..(t + 1) * 2]);
            r.starts.push(tr.starts[t]);
            r.actions.push(tr.actions[t]);
            r.log_probs.push(tr.log_probs[t]);
            r.values.push(tr.values[t]);
            r.rewards.push(tr.rewards[t]);
            r.dones.push(tr.dones[t]);
            r.weights.extend_from_slice(&tr.weights[t * n..(t + 1) * n]);
        }
    }
    Ok(r)
}
