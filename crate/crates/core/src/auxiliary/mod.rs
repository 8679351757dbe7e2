//! Self-supervised auxiliary losses: inverse dynamics, temporal distance and
//! action-conditional CPC.
//!
//! Every loss works on a [`TrajectoryBatch`]: time-major rows `t * B + b`
//! holding visual embeddings and beliefs from one recurrent unroll, plus the
//! actions taken and the episode-start flags. Sampling (which pairs, anchors
//! and negatives are used) is separated into plain-data plans so that the
//! same draw can be replayed by independent reference computations.

mod plan;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Embedding, Graph, GruCell, Linear, NodeId, ParamGroup, ParamTape, Result, Tensor};
use crate::sim::Action;

pub use plan::{
    cpc_offset_weights, horizon_weights, plan_cpc, plan_id, plan_td, segments, CpcAnchor,
    CpcPlan, IdPair, IdPlan, Segment, TdPair, TdPlan, CPC_HORIZONS, CPC_MAX_HORIZON,
};

pub const DEFAULT_BETA_ID: f64 = 0.1;
pub const DEFAULT_BETA_CPC: f64 = 0.1;
pub const DEFAULT_BETA_TD: f64 = 0.4;
pub const DEFAULT_ID_SUBSAMPLE: f64 = 0.1;
pub const DEFAULT_CPC_SUBSAMPLE: f64 = 0.2;
pub const DEFAULT_TD_PAIRS: usize = 8;
pub const CPC_ACTION_EMBED: usize = 4;
pub const CPC_DECODER_HIDDEN: usize = 32;
/// Output layers of every decoder start near zero so their losses begin at
/// the zero-information values (ln 4 for ID, ln 2 per CPC pair).
pub const HEAD_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxTaskKind {
    InverseDynamics,
    TemporalDistance,
    Cpc { k: usize },
    WeightedCpc16,
}

impl AuxTaskKind {
    pub fn name(&self) -> String {
        match self {
            AuxTaskKind::InverseDynamics => "id".into(),
            AuxTaskKind::TemporalDistance => "td".into(),
            AuxTaskKind::Cpc { k } => format!("cpc{k}"),
            AuxTaskKind::WeightedCpc16 => "cpc16w".into(),
        }
    }

    pub fn default_beta(&self) -> f64 {
        match self {
            AuxTaskKind::TemporalDistance => DEFAULT_BETA_TD,
            AuxTaskKind::InverseDynamics => DEFAULT_BETA_ID,
            _ => DEFAULT_BETA_CPC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTaskConfig {
    #[serde(flatten)]
    pub kind: AuxTaskKind,
    /// Loss coefficient; defaults per task kind.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Fraction of candidate pairs (ID) or anchors (CPC) kept.
    #[serde(default)]
    pub subsample: Option<f64>,
    /// Pairs drawn per trajectory (TD).
    #[serde(default)]
    pub pairs: Option<usize>,
    /// Normalize TD targets by segment length.
    #[serde(default = "default_true")]
    pub td_normalize: bool,
    /// Belief module the task reads; defaults to config order.
    #[serde(default)]
    pub module: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl AuxTaskConfig {
    pub fn new(kind: AuxTaskKind) -> Self {
        Self {
            kind,
            beta: None,
            subsample: None,
            pairs: None,
            td_normalize: true,
            module: None,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.kind.default_beta())
    }

    pub fn subsample(&self) -> f64 {
        self.subsample.unwrap_or(match self.kind {
            AuxTaskKind::InverseDynamics => DEFAULT_ID_SUBSAMPLE,
            _ => DEFAULT_CPC_SUBSAMPLE,
        })
    }

    pub fn pairs(&self) -> usize {
        self.pairs.unwrap_or(DEFAULT_TD_PAIRS)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let b = self.beta();
        if !(b > 0.0 && b.is_finite()) {
            return Err(format!("{}: beta must be positive, got {b}", self.kind.name()));
        }
        let s = self.subsample();
        if !(s > 0.0 && s <= 1.0) {
            return Err(format!("{}: subsample must be in (0, 1], got {s}", self.kind.name()));
        }
        if let AuxTaskKind::Cpc { k } = self.kind {
            if !CPC_HORIZONS.contains(&k) {
                return Err(format!("cpc horizon {k} not in {CPC_HORIZONS:?}"));
            }
        }
        if self.pairs() == 0 {
            return Err("td pairs must be at least 1".into());
        }
        Ok(())
    }
}

/// Action-conditional predictor: action embedding, a GRU seeded with the
/// belief, and a two-layer scorer on `[g ‖ φ]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpcHead {
    pub action_embed: Embedding,
    pub gru: GruCell,
    pub hidden_layer: Linear,
    pub output_layer: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TaskHead {
    InverseDynamics(Linear),
    TemporalDistance(Linear),
    Cpc(CpcHead),
}

impl TaskHead {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        rng: &mut R,
        name: &str,
        kind: AuxTaskKind,
        embedding: usize,
        hidden: usize,
    ) -> Self {
        let g = ParamGroup::Aux;
        let feat = 2 * embedding + hidden;
        match kind {
            AuxTaskKind::InverseDynamics => TaskHead::InverseDynamics(Linear::new(
                tape,
                rng,
                &format!("{name}.decoder"),
                feat,
                Action::COUNT,
                HEAD_GAIN,
                g,
            )),
            AuxTaskKind::TemporalDistance => TaskHead::TemporalDistance(Linear::new(
                tape,
                rng,
                &format!("{name}.decoder"),
                feat,
                1,
                HEAD_GAIN,
                g,
            )),
            AuxTaskKind::Cpc { .. } | AuxTaskKind::WeightedCpc16 => TaskHead::Cpc(CpcHead {
                action_embed: Embedding::new(
                    tape,
                    rng,
                    &format!("{name}.action_embed"),
                    Action::COUNT,
                    CPC_ACTION_EMBED,
                    g,
                ),
                gru: GruCell::new(tape, rng, &format!("{name}.gru"), CPC_ACTION_EMBED, hidden, g),
                hidden_layer: Linear::new(
                    tape,
                    rng,
                    &format!("{name}.decoder0"),
                    hidden + embedding,
                    CPC_DECODER_HIDDEN,
                    1.0,
                    g,
                ),
                output_layer: Linear::new(
                    tape,
                    rng,
                    &format!("{name}.decoder1"),
                    CPC_DECODER_HIDDEN,
                    1,
                    HEAD_GAIN,
                    g,
                ),
            }),
        }
    }
}

/// Graph-resident view of one unrolled batch.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch<'a> {
    /// `[T*B, E]` visual embeddings.
    pub phi: NodeId,
    /// `[T*B, H]` beliefs of the module this task reads.
    pub belief: NodeId,
    /// Action taken at each row.
    pub actions: &'a [usize],
    /// True where the row's observation begins a new episode.
    pub starts: &'a [bool],
    pub steps: usize,
    pub batch: usize,
}

impl TrajectoryBatch<'_> {
    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }

    pub fn segments(&self) -> Vec<Segment> {
        segments(self.starts, self.steps, self.batch)
    }
}

/// Result of one auxiliary loss evaluation.
#[derive(Debug, Clone)]
pub struct AuxLoss {
    /// Scalar loss node, already reduced.
    pub loss: NodeId,
    pub report: AuxLossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxLossReport {
    pub task: String,
    pub raw_loss: f64,
    pub beta: f64,
    pub weighted_loss: f64,
    /// ID action accuracy, CPC binary accuracy, or TD mean absolute error.
    pub diagnostic: f64,
    /// CPC only: mean loss per scored pair, independent of the reduction.
    pub per_pair_loss: Option<f64>,
    pub samples: usize,
    pub no_pairs: bool,
}

impl AuxLossReport {
    fn new(task: String, beta: f64, raw: f64, diagnostic: f64, samples: usize) -> Self {
        Self {
            task,
            raw_loss: raw,
            beta,
            weighted_loss: beta * raw,
            diagnostic,
            per_pair_loss: None,
            samples,
            no_pairs: samples == 0,
        }
    }
}

fn zero_loss(g: &mut Graph<'_>, task: String, beta: f64) -> Result<AuxLoss> {
    let loss = g.constant(Tensor::scalar(0.0))?;
    Ok(AuxLoss {
        loss,
        report: AuxLossReport::new(task, beta, 0.0, 0.0, 0),
    })
}

/// Features `[φ_a ‖ φ_b ‖ h]` for row triples.
fn pair_features(
    g: &mut Graph<'_>,
    batch: &TrajectoryBatch<'_>,
    a: &[usize],
    b: &[usize],
    h: &[usize],
) -> Result<NodeId> {
    let pa = g.gather_rows(batch.phi, a)?;
    let pb = g.gather_rows(batch.phi, b)?;
    let hh = g.gather_rows(batch.belief, h)?;
    g.concat_cols(&[pa, pb, hh])
}

pub fn inverse_dynamics_loss(
    g: &mut Graph<'_>,
    head: &Linear,
    batch: &TrajectoryBatch<'_>,
    plan: &IdPlan,
    beta: f64,
) -> Result<AuxLoss> {
    let task = AuxTaskKind::InverseDynamics.name();
    if plan.pairs.is_empty() {
        return zero_loss(g, task, beta);
    }
    let a: Vec<usize> = plan.pairs.iter().map(|p| p.row).collect();
    let b: Vec<usize> = plan.pairs.iter().map(|p| p.next_row).collect();
    let h: Vec<usize> = plan.pairs.iter().map(|p| p.end_row).collect();
    let targets: Vec<usize> = plan.pairs.iter().map(|p| p.action).collect();
    let x = pair_features(g, batch, &a, &b, &h)?;
    let logits = head.forward(g, x)?;
    let ce = g.cross_entropy(logits, &targets)?;
    let loss = g.mean(ce)?;
    let lv = g.value(logits);
    let hits = (0..lv.rows)
        .filter(|&r| argmax(lv.row(r)) == targets[r])
        .count();
    let n = targets.len();
    let raw = g.scalar(loss);
    Ok(AuxLoss {
        loss,
        report: AuxLossReport::new(task, beta, raw, hits as f64 / n as f64, n),
    })
}

pub fn temporal_distance_loss(
    g: &mut Graph<'_>,
    head: &Linear,
    batch: &TrajectoryBatch<'_>,
    plan: &TdPlan,
    beta: f64,
) -> Result<AuxLoss> {
    let task = AuxTaskKind::TemporalDistance.name();
    if plan.pairs.is_empty() {
        return zero_loss(g, task, beta);
    }
    let a: Vec<usize> = plan.pairs.iter().map(|p| p.row_i).collect();
    let b: Vec<usize> = plan.pairs.iter().map(|p| p.row_j).collect();
    let h: Vec<usize> = plan.pairs.iter().map(|p| p.end_row).collect();
    let target = Tensor::column(plan.pairs.iter().map(|p| p.target).collect());
    let x = pair_features(g, batch, &a, &b, &h)?;
    let pred = head.forward(g, x)?;
    let t = g.constant(target)?;
    let err = g.sub(pred, t)?;
    let sq = g.mul(err, err)?;
    let m = g.mean(sq)?;
    let loss = g.scale(m, 0.5)?;
    let n = plan.pairs.len();
    let mae = g.value(err).data.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
    let raw = g.scalar(loss);
    Ok(AuxLoss {
        loss,
        report: AuxLossReport::new(task, beta, raw, mae, n),
    })
}

/// CPC|A with per-offset weights `weights[d - 1]`; offsets past the end of
/// `weights` are not scored. The reduction divides by the anchor count, so
/// summing runs with unit weights over several horizons equals one run
/// with the summed weights.
pub fn cpc_weighted_loss(
    g: &mut Graph<'_>,
    head: &CpcHead,
    batch: &TrajectoryBatch<'_>,
    plan: &CpcPlan,
    weights: &[f64],
    task: String,
    beta: f64,
) -> Result<AuxLoss> {
    let horizon = weights.len().min(CPC_MAX_HORIZON);
    let anchors = &plan.anchors;
    if anchors.is_empty() || horizon == 0 {
        return zero_loss(g, task, beta);
    }
    let anchor_rows: Vec<usize> = anchors.iter().map(|a| a.row).collect();
    let mut state = g.gather_rows(batch.belief, &anchor_rows)?;
    let mut parts = Vec::new();
    let mut pos_rows = Vec::new();
    let mut neg_rows = Vec::new();
    let mut pair_weights = Vec::new();
    let deepest = anchors.iter().map(|a| a.valid).max().unwrap_or(0).min(horizon);
    for d in 1..=deepest {
        // Anchors whose segment ends before offset d feed a placeholder
        // action; their predictions at d are never scored.
        let acts: Vec<usize> = anchors
            .iter()
            .map(|a| {
                if d <= a.valid {
                    batch.actions[a.row + (d - 1) * batch.batch]
                } else {
                    0
                }
            })
            .collect();
        let x = head.action_embed.forward(g, &acts)?;
        state = head.gru.step(g, x, state)?;
        let live: Vec<usize> = (0..anchors.len()).filter(|&i| d <= anchors[i].valid).collect();
        if live.is_empty() || weights[d - 1] == 0.0 {
            continue;
        }
        parts.push(g.gather_rows(state, &live)?);
        for &i in &live {
            pos_rows.push(anchors[i].row + d * batch.batch);
            neg_rows.push(plan.negatives[i][d - 1]);
            pair_weights.push(weights[d - 1]);
        }
    }
    if parts.is_empty() {
        return zero_loss(g, task, beta);
    }
    let gs = g.concat_rows(&parts)?;
    let pos = g.gather_rows(batch.phi, &pos_rows)?;
    let neg = g.gather_rows(batch.phi, &neg_rows)?;
    let xp = g.concat_cols(&[gs, pos])?;
    let xn = g.concat_cols(&[gs, neg])?;
    let x = g.concat_rows(&[xp, xn])?;
    let hid = head.hidden_layer.forward(g, x)?;
    let hid = g.relu(hid)?;
    let logits = head.output_layer.forward(g, hid)?;
    let p = pos_rows.len();
    let mut targets = vec![1.0; p];
    targets.extend(std::iter::repeat_n(0.0, p));
    let bce = g.bce_with_logits(logits, &targets)?;
    // each pair contributes half its positive and half its negative score
    let scale: Vec<f64> = pair_weights
        .iter()
        .chain(pair_weights.iter())
        .map(|w| 0.5 * w / anchors.len() as f64)
        .collect();
    let s = g.constant(Tensor::column(scale))?;
    let weighted = g.mul(bce, s)?;
    let loss = g.sum(weighted)?;

    let bv = g.value(bce).data;
    let lv = g.value(logits).data;
    let per_pair = (0..p).map(|i| 0.5 * (bv[i] + bv[p + i])).sum::<f64>() / p as f64;
    let correct = (0..p).filter(|&i| lv[i] > 0.0).count() + (p..2 * p).filter(|&i| lv[i] < 0.0).count();
    let raw = g.scalar(loss);
    let mut report = AuxLossReport::new(task, beta, raw, correct as f64 / (2 * p) as f64, p);
    report.per_pair_loss = Some(per_pair);
    Ok(AuxLoss { loss, report })
}

pub fn cpc_loss(
    g: &mut Graph<'_>,
    head: &CpcHead,
    batch: &TrajectoryBatch<'_>,
    plan: &CpcPlan,
    k: usize,
    beta: f64,
) -> Result<AuxLoss> {
    let w = horizon_weights(k);
    cpc_weighted_loss(g, head, batch, plan, &w, AuxTaskKind::Cpc { k }.name(), beta)
}

pub fn weighted_cpc16_loss(
    g: &mut Graph<'_>,
    head: &CpcHead,
    batch: &TrajectoryBatch<'_>,
    plan: &CpcPlan,
    beta: f64,
) -> Result<AuxLoss> {
    let w = cpc_offset_weights();
    cpc_weighted_loss(g, head, batch, plan, &w, AuxTaskKind::WeightedCpc16.name(), beta)
}

/// `Σ β_i L_i − μ H_attn` over already computed reports.
pub fn total_aux_loss(reports: &[AuxLossReport], attention_entropy: f64, mu: f64) -> f64 {
    reports.iter().map(|r| r.weighted_loss).sum::<f64>() - mu * attention_entropy
}

/// Draws the plan a task needs and evaluates its loss.
pub fn evaluate_task<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    cfg: &AuxTaskConfig,
    head: &TaskHead,
    batch: &TrajectoryBatch<'_>,
    rng: &mut R,
) -> Result<AuxLoss> {
    let beta = cfg.beta();
    match (cfg.kind, head) {
        (AuxTaskKind::InverseDynamics, TaskHead::InverseDynamics(lin)) => {
            let plan = plan_id(batch.starts, batch.actions, batch.steps, batch.batch, cfg.subsample(), rng);
            inverse_dynamics_loss(g, lin, batch, &plan, beta)
        }
        (AuxTaskKind::TemporalDistance, TaskHead::TemporalDistance(lin)) => {
            let plan = plan_td(batch.starts, batch.steps, batch.batch, cfg.pairs(), cfg.td_normalize, rng);
            temporal_distance_loss(g, lin, batch, &plan, beta)
        }
        (AuxTaskKind::Cpc { k }, TaskHead::Cpc(h)) => {
            let plan = plan_cpc(batch.starts, batch.steps, batch.batch, cfg.subsample(), rng);
            cpc_loss(g, h, batch, &plan, k, beta)
        }
        (AuxTaskKind::WeightedCpc16, TaskHead::Cpc(h)) => {
            let plan = plan_cpc(batch.starts, batch.steps, batch.batch, cfg.subsample(), rng);
            weighted_cpc16_loss(g, h, batch, &plan, beta)
        }
        _ => Err(crate::nn::NnError::Config(format!(
            "head does not match task {}",
            cfg.kind.name()
        ))),
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
