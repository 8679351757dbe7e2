use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rollout::Rollout;
use super::TrainError;
use crate::agent::{Agent, SequenceInput};
use crate::auxiliary::{evaluate_task, AuxLossReport, TrajectoryBatch};
use crate::nn::{AdamConfig, Graph, NnError, NodeId, Result as NnResult, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub workers: usize,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub gamma: f64,
    pub tau: f64,
    pub clip: f64,
    pub adam: AdamConfig,
    /// Action-entropy bonus α.
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Multiplier on every auxiliary β; 0 disables auxiliary losses.
    pub aux_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            rollout_len: 128,
            epochs: 4,
            minibatches: 2,
            gamma: 0.99,
            tau: 0.95,
            clip: 0.1,
            adam: AdamConfig::default(),
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            aux_scale: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn frames_per_update(&self) -> usize {
        self.workers * self.rollout_len
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 {
            return Err("workers, rollout length, epochs and minibatches must be positive".into());
        }
        if self.workers % self.minibatches != 0 {
            return Err(format!(
                "{} workers cannot be split into {} minibatches",
                self.workers, self.minibatches
            ));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(format!("clip {} must be in (0, 1)", self.clip));
        }
        for (name, v) in [("gamma", self.gamma), ("tau", self.tau)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} {v} must be in (0, 1]"));
            }
        }
        if !(self.adam.lr > 0.0 && self.adam.eps > 0.0 && self.max_grad_norm > 0.0) {
            return Err("learning rate, Adam eps and grad-norm cap must be positive".into());
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.aux_scale < 0.0 {
            return Err("loss coefficients must be non-negative".into());
        }
        Ok(())
    }
}

/// Generalized advantage estimation over a time-major `[T, B]` layout.
/// `dones[t]` cuts both the bootstrap and the recursion after step `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    tau: f64,
) -> (Vec<f64>, Vec<f64>) {
    let b_len = bootstrap.len();
    let rows = rewards.len();
    assert!(b_len > 0 && rows % b_len == 0 && values.len() == rows && dones.len() == rows);
    let steps = rows / b_len;
    let mut adv = vec![0.0; rows];
    for b in 0..b_len {
        let mut next_adv = 0.0;
        let mut next_value = bootstrap[b];
        for t in (0..steps).rev() {
            let r = t * b_len + b;
            let live = if dones[r] { 0.0 } else { 1.0 };
            let delta = rewards[r] + gamma * next_value * live - values[r];
            next_adv = delta + gamma * tau * live * next_adv;
            adv[r] = next_adv;
            next_value = values[r];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Mean 0, standard deviation 1 (population), with 1e-8 in the denominator.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    xs.iter().map(|x| (x - mean) / (sd + 1e-8)).collect()
}

/// Scalar pieces of one minibatch loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub action_entropy: f64,
    pub attention_entropy: f64,
    pub aux: Vec<AuxLossReport>,
    pub total: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl LossBreakdown {
    /// Reassembles the total from its parts.
    pub fn assembled(&self, cfg: &PpoConfig, mu: f64) -> f64 {
        self.policy + cfg.value_coef * self.value - cfg.entropy_coef * self.action_entropy
            + self.aux.iter().map(|r| r.weighted_loss).sum::<f64>()
            - mu * self.attention_entropy
    }

    fn mean_of(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        let aux = (0..parts[0].aux.len())
            .map(|i| {
                let mut r = parts[0].aux[i].clone();
                r.raw_loss = avg(&|p| p.aux[i].raw_loss);
                r.weighted_loss = avg(&|p| p.aux[i].weighted_loss);
                r.diagnostic = avg(&|p| p.aux[i].diagnostic);
                r.per_pair_loss = r.per_pair_loss.map(|_| avg(&|p| p.aux[i].per_pair_loss.unwrap_or(0.0)));
                r.samples = parts.iter().map(|p| p.aux[i].samples).sum();
                r.no_pairs = parts.iter().all(|p| p.aux[i].no_pairs);
                r
            })
            .collect();
        LossBreakdown {
            policy: avg(&|p| p.policy),
            value: avg(&|p| p.value),
            action_entropy: avg(&|p| p.action_entropy),
            attention_entropy: avg(&|p| p.attention_entropy),
            aux,
            total: avg(&|p| p.total),
            clip_fraction: avg(&|p| p.clip_fraction),
            grad_norm: avg(&|p| p.grad_norm),
        }
    }
}

/// Minibatch with precomputed advantages and returns, aligned to its rows.
pub struct Minibatch<'a> {
    pub data: &'a Rollout,
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Builds the full training loss for one minibatch. Returns the scalar loss
/// node and its breakdown (grad norm left at zero).
pub fn minibatch_loss<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    agent: &Agent,
    mb: &Minibatch<'_>,
    cfg: &PpoConfig,
    rng: &mut R,
) -> NnResult<(NodeId, LossBreakdown)> {
    let d = mb.data;
    let keep = d.keep();
    let nodes = agent.forward_sequence(
        g,
        SequenceInput {
            ego: &d.ego,
            gps: &d.gps,
            keep: &keep,
            h0: &d.h0,
            batch: d.workers,
        },
        None,
    )?;
    let rows = d.frames();
    let col = |v: &[f64]| Tensor::column(v.to_vec());

    let lp = g.log_softmax(nodes.logits)?;
    let logp = g.pick_cols(lp, &d.actions)?;
    let old = g.constant(col(&d.log_probs))?;
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff)?;
    let adv = g.constant(col(mb.advantages))?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr)?;
    let policy = g.neg(surr)?;

    let ret = g.constant(col(mb.returns))?;
    let verr = g.sub(nodes.values, ret)?;
    let vsq = g.mul(verr, verr)?;
    let vmean = g.mean(vsq)?;
    let value = g.scale(vmean, 0.5)?;

    let probs = g.softmax(nodes.logits)?;
    let ent = g.entropy(probs)?;
    let h_action = g.mean(ent)?;

    let mut total = g.scale(value, cfg.value_coef)?;
    total = g.add(policy, total)?;
    let ent_term = g.scale(h_action, -cfg.entropy_coef)?;
    total = g.add(total, ent_term)?;

    let mut aux = Vec::new();
    if cfg.aux_scale > 0.0 {
        let modules = agent.config.task_modules();
        for ((task, head), &m) in agent.config.belief.tasks.iter().zip(&agent.heads).zip(&modules) {
            let batch = TrajectoryBatch {
                phi: nodes.phi,
                belief: nodes.beliefs[m],
                actions: &d.actions,
                starts: &d.starts,
                steps: d.steps,
                batch: d.workers,
            };
            let mut t = task.clone();
            t.beta = Some(task.beta() * cfg.aux_scale);
            let out = evaluate_task(g, &t, head, &batch, rng)?;
            let term = g.scale(out.loss, out.report.beta)?;
            total = g.add(total, term)?;
            aux.push(out.report);
        }
    }

    let mu = agent.config.fusion.entropy_coef;
    let h_attn = if agent.module_count() > 1 {
        let e = g.entropy(nodes.weights)?;
        let h = g.mean(e)?;
        if mu > 0.0 {
            let term = g.scale(h, -mu)?;
            total = g.add(total, term)?;
        }
        g.scalar(h)
    } else {
        0.0
    };

    let rv = g.value(ratio).data;
    let clip_fraction =
        rv.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / rows as f64;
    let breakdown = LossBreakdown {
        policy: g.scalar(policy),
        value: g.scalar(value),
        action_entropy: g.scalar(h_action),
        attention_entropy: h_attn,
        aux,
        total: g.scalar(total),
        clip_fraction,
        grad_norm: 0.0,
    };
    Ok((total, breakdown))
}

/// Runs all PPO epochs over one rollout and returns the mean breakdown.
/// On a non-finite loss the parameters are left as they were before the
/// failing minibatch and the error names that minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    rollout: &Rollout,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossBreakdown, TrainError> {
    let (adv, ret) = compute_gae(
        &rollout.rewards,
        &rollout.values,
        &rollout.dones,
        &rollout.bootstrap,
        cfg.gamma,
        cfg.tau,
    );
    let adv = if cfg.normalize_advantages { normalize(&adv) } else { adv };
    let per_mb = rollout.workers / cfg.minibatches;
    let mut parts = Vec::new();
    let mut order: Vec<usize> = (0..rollout.workers).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for m in 0..cfg.minibatches {
            let mut cols = order[m * per_mb..(m + 1) * per_mb].to_vec();
            cols.sort_unstable();
            let sub = rollout.select_workers(&cols);
            let pick = |v: &[f64]| -> Vec<f64> {
                (0..rollout.steps)
                    .flat_map(|t| cols.iter().map(move |&b| t * rollout.workers + b))
                    .map(|r| v[r])
                    .collect()
            };
            let (sub_adv, sub_ret) = (pick(&adv), pick(&ret));
            let mb = Minibatch {
                data: &sub,
                advantages: &sub_adv,
                returns: &sub_ret,
            };
            let index = epoch * cfg.minibatches + m;
            let nonfinite = |e: NnError| match e {
                NnError::NonFinite { .. } => TrainError::NonFinite {
                    minibatch: index,
                    detail: e.to_string(),
                },
                other => TrainError::Nn(other),
            };
            let (grads, mut breakdown) = {
                let mut g = Graph::new(&agent.tape);
                let (loss, breakdown) = minibatch_loss(&mut g, agent, &mb, cfg, rng).map_err(nonfinite)?;
                (g.backward(loss).map_err(nonfinite)?, breakdown)
            };
            if grads.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    minibatch: index,
                    detail: "non-finite gradient".into(),
                });
            }
            agent.tape.zero_grad();
            agent.tape.accumulate(&grads);
            breakdown.grad_norm = agent.tape.clip_grad_norm(cfg.max_grad_norm);
            agent.tape.adam_step(&cfg.adam)?;
            parts.push(breakdown);
        }
    }
    Ok(LossBreakdown::mean_of(&parts))
}
