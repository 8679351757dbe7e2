//! Naive scalar re-implementations used as oracles by several test targets.
//! Nothing here calls the graph engine; every formula is written out with
//! plain loops over parameter values read from the tape.
#![allow(dead_code)]

pub mod fusion_props;
pub mod analysis_cases;
pub mod calibration;
pub mod env_cases;
pub mod oracle_cases;
pub mod runs;

use auxnav::auxiliary::{CpcHead, CpcPlan, TdPlan};
use auxnav::nn::{GruCell, Linear, ParamTape};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let l = log_sum_exp(xs);
    xs.iter().map(|x| (x - l).exp()).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

/// `y_j = b_j + Σ_i x_i W[i, j]`.
pub fn linear(tape: &ParamTape, lin: &Linear, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), lin.in_dim);
    let w = tape.view(lin.weight);
    let b = tape.view(lin.bias);
    (0..lin.out_dim)
        .map(|j| b.data[j] + (0..lin.in_dim).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

pub fn gru_step(tape: &ParamTape, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hs = cell.hidden_size;
    let wi = tape.view(cell.w_input);
    let wh = tape.view(cell.w_hidden);
    let bi = tape.view(cell.b_input);
    let bh = tape.view(cell.b_hidden);
    let xp = |c: usize| bi.data[c] + (0..x.len()).map(|i| x[i] * wi.get(i, c)).sum::<f64>();
    let hp = |c: usize| bh.data[c] + (0..hs).map(|i| h[i] * wh.get(i, c)).sum::<f64>();
    (0..hs)
        .map(|k| {
            let r = sigmoid(xp(k) + hp(k));
            let z = sigmoid(xp(hs + k) + hp(hs + k));
            let n = (xp(2 * hs + k) + r * hp(2 * hs + k)).tanh();
            (1.0 - z) * n + z * h[k]
        })
        .collect()
}

/// A random time-major batch with embeddings, beliefs, actions and episode
/// starts.
#[derive(Debug, Clone)]
pub struct Slice {
    pub steps: usize,
    pub batch: usize,
    pub e: usize,
    pub h: usize,
    pub phi: Vec<f64>,
    pub belief: Vec<f64>,
    pub actions: Vec<usize>,
    pub starts: Vec<bool>,
}

impl Slice {
    pub fn random<R: Rng>(rng: &mut R, steps: usize, batch: usize, e: usize, h: usize, p_start: f64) -> Self {
        let rows = steps * batch;
        Self {
            steps,
            batch,
            e,
            h,
            phi: (0..rows * e).map(|_| rng.random_range(-1.0..1.0)).collect(),
            belief: (0..rows * h).map(|_| rng.random_range(-1.0..1.0)).collect(),
            actions: (0..rows).map(|_| rng.random_range(0..4)).collect(),
            starts: (0..rows).map(|_| rng.random_bool(p_start)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }

    pub fn phi(&self, row: usize) -> &[f64] {
        &self.phi[row * self.e..(row + 1) * self.e]
    }

    pub fn belief(&self, row: usize) -> &[f64] {
        &self.belief[row * self.h..(row + 1) * self.h]
    }

    /// Episode label of every row: the number of episode starts seen so far
    /// on that worker, counting the window start as one.
    pub fn episode_labels(&self) -> Vec<usize> {
        let mut label = vec![0; self.rows()];
        for b in 0..self.batch {
            let mut id = b * self.steps;
            for t in 0..self.steps {
                let r = t * self.batch + b;
                if t > 0 && self.starts[r] {
                    id += 1;
                }
                label[r] = id;
            }
        }
        label
    }

    /// `(first step, one past the last step)` of the episode run holding `row`.
    pub fn run_bounds(&self, row: usize) -> (usize, usize) {
        let labels = self.episode_labels();
        let b = row % self.batch;
        let in_run: Vec<usize> = (0..self.steps)
            .filter(|&t| labels[t * self.batch + b] == labels[row])
            .collect();
        (in_run[0], in_run[in_run.len() - 1] + 1)
    }
}

/// Every `(t, t+1)` pair inside one episode run, scored with the belief at
/// the run's last step.
pub fn inverse_dynamics(tape: &ParamTape, head: &Linear, s: &Slice) -> (f64, usize) {
    let labels = s.episode_labels();
    let mut total = 0.0;
    let mut n = 0;
    for b in 0..s.batch {
        for t in 0..s.steps - 1 {
            let (r0, r1) = (t * s.batch + b, (t + 1) * s.batch + b);
            if labels[r0] != labels[r1] {
                continue;
            }
            let end = s.run_bounds(r0).1 - 1;
            let mut x = s.phi(r0).to_vec();
            x.extend_from_slice(s.phi(r1));
            x.extend_from_slice(s.belief(end * s.batch + b));
            let logits = linear(tape, head, &x);
            total += log_sum_exp(&logits) - logits[s.actions[r0]];
            n += 1;
        }
    }
    (if n == 0 { 0.0 } else { total / n as f64 }, n)
}

/// Temporal-distance loss over the given row pairs, with targets and the
/// conditioning row recomputed from the episode labels.
pub fn temporal_distance(tape: &ParamTape, head: &Linear, s: &Slice, plan: &TdPlan, normalize: bool) -> f64 {
    let labels = s.episode_labels();
    let mut total = 0.0;
    for p in &plan.pairs {
        assert_eq!(labels[p.row_i], labels[p.row_j], "pair crosses an episode boundary");
        assert_ne!(p.row_i, p.row_j);
        let b = p.row_i % s.batch;
        let (start, end) = s.run_bounds(p.row_i);
        let (ti, tj) = (p.row_i / s.batch, p.row_j / s.batch);
        let gap = ti.abs_diff(tj) as f64;
        let target = if normalize { gap / (end - start) as f64 } else { gap };
        let mut x = s.phi(p.row_i).to_vec();
        x.extend_from_slice(s.phi(p.row_j));
        x.extend_from_slice(s.belief((end - 1) * s.batch + b));
        let pred = linear(tape, head, &x)[0];
        total += 0.5 * (pred - target).powi(2);
    }
    total / plan.pairs.len() as f64
}

/// Anchors every row that has at least one future step in its run; each
/// holds `(row, number of scorable offsets capped at max_horizon)`.
pub fn cpc_anchors(s: &Slice, max_horizon: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..s.rows() {
        let t = r / s.batch;
        let end = s.run_bounds(r).1;
        if t + 1 < end {
            out.push((r, (end - 1 - t).min(max_horizon)));
        }
    }
    out.sort_unstable();
    out
}

/// Weighted CPC|A: `Σ_anchors Σ_d w_d · ½(BCE(pos) + BCE(neg)) / anchors`.
/// Returns the loss and the mean per-pair loss.
pub fn cpc(tape: &ParamTape, head: &CpcHead, s: &Slice, plan: &CpcPlan, weights: &[f64]) -> (f64, f64) {
    let table = tape.view(head.action_embed.table);
    let score = |state: &[f64], z: &[f64]| {
        let mut x = state.to_vec();
        x.extend_from_slice(z);
        let hid: Vec<f64> = linear(tape, &head.hidden_layer, &x).into_iter().map(|v| v.max(0.0)).collect();
        linear(tape, &head.output_layer, &hid)[0]
    };
    let mut total = 0.0;
    let mut pair_sum = 0.0;
    let mut pairs = 0;
    for (a, anchor) in plan.anchors.iter().enumerate() {
        let mut state = s.belief(anchor.row).to_vec();
        for d in 1..=anchor.valid.min(weights.len()) {
            let act = s.actions[anchor.row + (d - 1) * s.batch];
            state = gru_step(tape, &head.gru, table.row(act), &state);
            let lp = score(&state, s.phi(anchor.row + d * s.batch));
            let ln = score(&state, s.phi(plan.negatives[a][d - 1]));
            let pair = 0.5 * (softplus(-lp) + softplus(ln));
            total += weights[d - 1] * pair;
            if weights[d - 1] != 0.0 {
                pair_sum += pair;
                pairs += 1;
            }
        }
    }
    let n = plan.anchors.len().max(1) as f64;
    (total / n, if pairs == 0 { 0.0 } else { pair_sum / pairs as f64 })
}

/// O(T²) advantage oracle: `A_t = Σ_l (γτ)^l · alive(t..t+l) · δ_{t+l}`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    tau: f64,
) -> Vec<f64> {
    let b_len = bootstrap.len();
    let steps = rewards.len() / b_len;
    let mut adv = vec![0.0; rewards.len()];
    for b in 0..b_len {
        let at = |t: usize| t * b_len + b;
        let delta = |t: usize| {
            let next = if t + 1 == steps { bootstrap[b] } else { values[at(t + 1)] };
            let live = if dones[at(t)] { 0.0 } else { 1.0 };
            rewards[at(t)] + gamma * live * next - values[at(t)]
        };
        for t in 0..steps {
            let mut sum = 0.0;
            let mut factor = 1.0;
            for l in t..steps {
                sum += factor * delta(l);
                if dones[at(l)] {
                    break;
                }
                factor *= gamma * tau;
            }
            adv[at(t)] = sum;
        }
    }
    adv
}

/// Relative-or-absolute closeness.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}
