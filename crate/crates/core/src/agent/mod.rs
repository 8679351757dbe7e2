//! Recurrent navigation agent: shared visual encoder, one or more belief
//! GRUs, a fusion module and a linear policy/value head. The agent also owns
//! the auxiliary task heads so that one parameter tape holds the full model.

mod fusion;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{AuxTaskConfig, TaskHead, HEAD_GAIN};
use crate::nn::{
    Conv2d, ConvGeometry, Graph, GruCell, Linear, NnError, NodeId, ParamGroup, ParamTape, Result,
    Tensor,
};
use crate::sim::{Action, Observation};

pub use fusion::{attention_entropy, fuse_values, FusionMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub view_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv2_channels: 16,
            view_size: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefConfig {
    pub count: usize,
    pub hidden: usize,
    #[serde(default)]
    pub tasks: Vec<AuxTaskConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Attention-entropy coefficient μ; only used by attention fusion.
    #[serde(default)]
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub embedding_size: usize,
    pub belief: BeliefConfig,
    pub fusion: FusionConfig,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_EMBEDDING: usize = 64;
pub const DEFAULT_HIDDEN: usize = 128;
pub const GPS_COMPASS_LEN: usize = 2;

impl AgentConfig {
    /// One belief module feeding the policy directly; all tasks share it.
    pub fn single(tasks: Vec<AuxTaskConfig>, seed: u64) -> Self {
        Self {
            encoder: EncoderConfig::default(),
            embedding_size: DEFAULT_EMBEDDING,
            belief: BeliefConfig {
                count: 1,
                hidden: DEFAULT_HIDDEN,
                tasks,
            },
            fusion: FusionConfig {
                method: FusionMethod::Average,
                entropy_coef: 0.0,
            },
            seed,
        }
    }

    /// One belief module per task, with the hidden size shrunk so the
    /// main-network parameter count matches [`AgentConfig::single`].
    pub fn multi(tasks: Vec<AuxTaskConfig>, method: FusionMethod, entropy_coef: f64, seed: u64) -> Self {
        let mut cfg = Self::single(tasks, seed);
        cfg.belief.count = cfg.belief.tasks.len().max(1);
        cfg.fusion = FusionConfig {
            method,
            entropy_coef,
        };
        let target = Self::single(Vec::new(), seed).main_param_count();
        cfg.belief.hidden = (4..=DEFAULT_HIDDEN)
            .min_by_key(|&h| {
                let mut c = cfg.clone();
                c.belief.hidden = h;
                c.main_param_count().abs_diff(target)
            })
            .unwrap_or(DEFAULT_HIDDEN);
        cfg
    }

    pub fn belief_input(&self) -> usize {
        self.embedding_size + GPS_COMPASS_LEN
    }

    fn conv_geometries(&self) -> (ConvGeometry, ConvGeometry) {
        let e = &self.encoder;
        let g1 = ConvGeometry {
            in_channels: Observation::CHANNELS,
            height: e.view_size,
            width: e.view_size,
            out_channels: e.conv1_channels,
            kernel: 3,
            stride: 1,
        };
        let g2 = ConvGeometry {
            in_channels: e.conv1_channels,
            height: g1.out_height(),
            width: g1.out_width(),
            out_channels: e.conv2_channels,
            kernel: 3,
            stride: 2,
        };
        (g1, g2)
    }

    /// Parameters in the encoder, belief modules, fusion and policy head.
    pub fn main_param_count(&self) -> usize {
        let (g1, g2) = self.conv_geometries();
        let conv = |g: ConvGeometry| g.out_channels * g.patch_len() + g.out_channels;
        let e = self.embedding_size;
        let h = self.belief.hidden;
        let n = self.belief.count;
        let enc = conv(g1) + conv(g2) + g2.out_len() * e + e;
        let gru = 3 * h * (self.belief_input() + h) + 6 * h;
        let fusion = match self.fusion.method {
            FusionMethod::SoftmaxGate if n > 1 => e * n + n,
            FusionMethod::DotAttention if n > 1 => e * h + h,
            _ => 0,
        };
        enc + n * gru + fusion + (h + 1) * (Action::COUNT + 1)
    }

    /// Module index each task reads.
    pub fn task_modules(&self) -> Vec<usize> {
        self.belief
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.module
                    .unwrap_or(if self.belief.count == 1 { 0 } else { i })
            })
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let b = &self.belief;
        if b.count == 0 || b.hidden == 0 || self.embedding_size == 0 {
            return Err("belief count, hidden size and embedding size must be positive".into());
        }
        if self.encoder.view_size < 7 || self.encoder.view_size % 2 == 0 {
            return Err(format!("view size {} must be odd and at least 7", self.encoder.view_size));
        }
        if let FusionMethod::Fixed(i) = self.fusion.method {
            if i >= b.count {
                return Err(format!("fixed fusion index {i} out of range for {} modules", b.count));
            }
        }
        if self.fusion.entropy_coef < 0.0 {
            return Err("entropy coefficient must be non-negative".into());
        }
        for (t, m) in b.tasks.iter().zip(self.task_modules()) {
            t.validate()?;
            if m >= b.count {
                return Err(format!("task {} assigned to missing module {m}", t.kind.name()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FusionLayer {
    None,
    Gate(Linear),
    Key(Linear),
}

/// The full model. Parameters live in `tape`; the remaining fields are
/// handles into it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub tape: ParamTape,
    pub encoder: Encoder,
    pub beliefs: Vec<GruCell>,
    pub fusion: FusionLayer,
    pub policy: Linear,
    pub heads: Vec<TaskHead>,
}

/// Per-worker recurrent state after a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSet {
    pub hidden: Vec<Vec<f64>>,
    pub fused: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BeliefSet {
    pub fn zeros(count: usize, hidden: usize) -> Self {
        Self {
            hidden: vec![vec![0.0; hidden]; count],
            fused: vec![0.0; hidden],
            weights: vec![1.0 / count as f64; count],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub logits: [f64; Action::COUNT],
    pub value: f64,
}

impl PolicyOutput {
    pub fn probabilities(&self) -> [f64; Action::COUNT] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = self.logits.map(|l| (l - m).exp());
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    pub fn entropy(&self) -> f64 {
        self.probabilities()
            .iter()
            .map(|&p| -p * p.max(crate::nn::ENTROPY_CLAMP).ln())
            .sum()
    }

    pub fn log_prob(&self, action: Action) -> f64 {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        self.logits[action.index()] - lse
    }

    pub fn greedy(&self) -> Action {
        Action::ALL[crate::auxiliary::argmax(&self.logits)]
    }

    /// Inverse-CDF draw from the softmax distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let p = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Action::ALL[i];
            }
        }
        Action::ALL[p.iter().rposition(|&x| x > 0.0).unwrap_or(0)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub policy: PolicyOutput,
    pub action: Action,
    pub log_prob: f64,
    pub beliefs: BeliefSet,
    pub embedding: Vec<f64>,
}

/// Time-major inputs for one recurrent unroll over `steps × batch` rows.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub ego: &'a [f64],
    pub gps: &'a [f64],
    /// 0.0 where the hidden state is reset before the row's step.
    pub keep: &'a [f64],
    /// Initial hidden state per module, `[batch, hidden]` each.
    pub h0: &'a [Tensor],
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceNodes {
    pub phi: NodeId,
    pub beliefs: Vec<NodeId>,
    pub fused: NodeId,
    pub weights: NodeId,
    pub logits: NodeId,
    pub values: NodeId,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate().map_err(NnError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tape = ParamTape::new();
        let main = ParamGroup::Main;
        let (g1, g2) = config.conv_geometries();
        let e = config.embedding_size;
        let h = config.belief.hidden;
        let n = config.belief.count;
        let encoder = Encoder {
            conv1: Conv2d::new(&mut tape, &mut rng, "encoder.conv1", g1, main),
            conv2: Conv2d::new(&mut tape, &mut rng, "encoder.conv2", g2, main),
            fc: Linear::new(&mut tape, &mut rng, "encoder.fc", g2.out_len(), e, 1.0, main),
        };
        let beliefs = (0..n)
            .map(|i| {
                GruCell::new(
                    &mut tape,
                    &mut rng,
                    &format!("belief{i}"),
                    config.belief_input(),
                    h,
                    main,
                )
            })
            .collect();
        let fusion = match config.fusion.method {
            FusionMethod::SoftmaxGate if n > 1 => {
                FusionLayer::Gate(Linear::new(&mut tape, &mut rng, "fusion.gate", e, n, 1.0, main))
            }
            FusionMethod::DotAttention if n > 1 => {
                FusionLayer::Key(Linear::new(&mut tape, &mut rng, "fusion.key", e, h, 1.0, main))
            }
            _ => FusionLayer::None,
        };
        let policy = Linear::new(
            &mut tape,
            &mut rng,
            "policy",
            h,
            Action::COUNT + 1,
            HEAD_GAIN,
            main,
        );
        let heads = config
            .belief
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TaskHead::new(
                    &mut tape,
                    &mut rng,
                    &format!("aux{i}.{}", t.kind.name()),
                    t.kind,
                    e,
                    h,
                )
            })
            .collect();
        Ok(Self {
            config,
            tape,
            encoder,
            beliefs,
            fusion,
            policy,
            heads,
        })
    }

    pub fn module_count(&self) -> usize {
        self.beliefs.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.config.belief.hidden
    }

    pub fn initial_beliefs(&self) -> BeliefSet {
        BeliefSet::zeros(self.module_count(), self.hidden_size())
    }

    /// Encoder output φ `[N, E]` for channel-major views `[N, 2·k·k]`.
    pub fn encode(&self, g: &mut Graph<'_>, ego: NodeId) -> Result<NodeId> {
        let x = self.encoder.conv1.forward(g, ego)?;
        let x = g.relu(x)?;
        let x = self.encoder.conv2.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.encoder.fc.forward(g, x)?;
        g.relu(x)
    }

    /// Fusion weights `[N, n]` and fused belief `[N, H]`.
    pub fn fuse(
        &self,
        g: &mut Graph<'_>,
        beliefs: &[NodeId],
        phi: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<(NodeId, NodeId)> {
        fusion::fuse(g, self, beliefs, phi, mask)
    }

    /// Policy logits `[N, 4]` and values `[N, 1]`.
    pub fn head(&self, g: &mut Graph<'_>, fused: NodeId) -> Result<(NodeId, NodeId)> {
        let out = self.policy.forward(g, fused)?;
        let logits = g.slice_cols(out, 0, Action::COUNT)?;
        let value = g.slice_cols(out, Action::COUNT, 1)?;
        Ok((logits, value))
    }

    /// Full forward pass over a time-major sequence, re-unrolling every
    /// belief module with the reset mask.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<'_>,
        input: SequenceInput<'_>,
        mask: Option<&[bool]>,
    ) -> Result<SequenceNodes> {
        let rows = input.keep.len();
        let vl = Observation::view_len(self.config.encoder.view_size);
        if input.ego.len() != rows * vl || input.gps.len() != rows * GPS_COMPASS_LEN {
            return Err(NnError::Shape {
                op: "forward_sequence",
                detail: format!("{rows} rows but {} view and {} gps values", input.ego.len(), input.gps.len()),
            });
        }
        if input.h0.len() != self.module_count() {
            return Err(NnError::Shape {
                op: "forward_sequence",
                detail: format!("{} initial states for {} modules", input.h0.len(), self.module_count()),
            });
        }
        let ego = g.constant(Tensor::from_vec(rows, vl, input.ego.to_vec()))?;
        let gps = g.constant(Tensor::from_vec(rows, GPS_COMPASS_LEN, input.gps.to_vec()))?;
        let phi = self.encode(g, ego)?;
        let x = g.concat_cols(&[phi, gps])?;
        let mut beliefs = Vec::with_capacity(self.module_count());
        for (gru, h0) in self.beliefs.iter().zip(input.h0) {
            let h0 = g.constant(h0.clone())?;
            beliefs.push(gru.unroll(g, x, h0, input.keep, input.batch)?);
        }
        let (fused, weights) = self.fuse(g, &beliefs, phi, mask)?;
        let (logits, values) = self.head(g, fused)?;
        Ok(SequenceNodes {
            phi,
            beliefs,
            fused,
            weights,
            logits,
            values,
        })
    }

    /// One acting step for one worker. `reset` zeroes the carried state.
    /// `rng = None` selects the greedy action.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        prev: &BeliefSet,
        reset: bool,
        mask: Option<&[bool]>,
        rng: Option<&mut R>,
    ) -> Result<ActOutput> {
        let h = self.hidden_size();
        if prev.hidden.len() != self.module_count() || prev.hidden.iter().any(|v| v.len() != h) {
            return Err(NnError::Shape {
                op: "act",
                detail: "belief set does not match the architecture".into(),
            });
        }
        let mut g = Graph::new(&self.tape);
        let vl = obs.ego_view.len();
        let ego = g.constant(Tensor::from_vec(1, vl, obs.ego_view.clone()))?;
        let gps = g.constant(Tensor::row_vector(obs.gps_compass.to_vec()))?;
        let phi = self.encode(&mut g, ego)?;
        let x = g.concat_cols(&[phi, gps])?;
        let mut hs = Vec::with_capacity(self.module_count());
        for (gru, hp) in self.beliefs.iter().zip(&prev.hidden) {
            let init = if reset { vec![0.0; h] } else { hp.clone() };
            let hn = g.constant(Tensor::row_vector(init))?;
            hs.push(gru.step(&mut g, x, hn)?);
        }
        let (fused, weights) = self.fuse(&mut g, &hs, phi, mask)?;
        let (logits, value) = self.head(&mut g, fused)?;
        let lv = g.value(logits).data;
        let policy = PolicyOutput {
            logits: [lv[0], lv[1], lv[2], lv[3]],
            value: g.scalar(value),
        };
        let action = match rng {
            Some(r) => policy.sample(r),
            None => policy.greedy(),
        };
        Ok(ActOutput {
            policy,
            action,
            log_prob: policy.log_prob(action),
            beliefs: BeliefSet {
                hidden: hs.iter().map(|&n| g.value(n).data.to_vec()).collect(),
                fused: g.value(fused).data.to_vec(),
                weights: g.value(weights).data.to_vec(),
            },
            embedding: g.value(phi).data.to_vec(),
        })
    }

    /// Recomputes fusion for stored beliefs with some modules excluded.
    pub fn mask_beliefs(&self, beliefs: &BeliefSet, embedding: &[f64], mask: &[bool]) -> Result<BeliefSet> {
        if mask.len() != self.module_count() {
            return Err(NnError::Config(format!(
                "mask has {} flags for {} modules",
                mask.len(),
                self.module_count()
            )));
        }
        let mut g = Graph::new(&self.tape);
        let phi = g.constant(Tensor::row_vector(embedding.to_vec()))?;
        let hs = beliefs
            .hidden
            .iter()
            .map(|h| g.constant(Tensor::row_vector(h.clone())))
            .collect::<Result<Vec<_>>>()?;
        let (fused, weights) = self.fuse(&mut g, &hs, phi, Some(mask))?;
        Ok(BeliefSet {
            hidden: beliefs.hidden.clone(),
            fused: g.value(fused).data.to_vec(),
            weights: g.value(weights).data.to_vec(),
        })
    }

    /// True when both agents have the same parameter layout.
    pub fn same_layout(&self, other: &Agent) -> bool {
        self.tape.infos().len() == other.tape.infos().len()
            && self
                .tape
                .infos()
                .iter()
                .zip(other.tape.infos())
                .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols)
    }
}
