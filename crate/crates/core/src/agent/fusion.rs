use serde::{Deserialize, Serialize};

use super::{Agent, FusionLayer};
use crate::nn::{Graph, NnError, NodeId, Result, Tensor, ENTROPY_CLAMP};

/// How belief modules are combined into the policy input. Every method is
/// expressed as per-module logits followed by a (masked) softmax, so the
/// returned weights always lie on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// All weight on one module.
    Fixed(usize),
    /// Equal weights.
    Average,
    /// Softmax of a linear map of φ.
    SoftmaxGate,
    /// Scaled dot product between each belief and a key computed from φ.
    DotAttention,
}

impl FusionMethod {
    pub fn has_parameters(&self) -> bool {
        matches!(self, FusionMethod::SoftmaxGate | FusionMethod::DotAttention)
    }
}

fn support(method: FusionMethod, n: usize, mask: Option<&[bool]>) -> Result<Option<Vec<bool>>> {
    if let Some(m) = mask {
        if m.len() != n {
            return Err(NnError::Config(format!("mask has {} flags for {n} modules", m.len())));
        }
    }
    let s: Option<Vec<bool>> = match (method, mask) {
        (FusionMethod::Fixed(i), m) => {
            if i >= n {
                return Err(NnError::Config(format!("fixed index {i} out of range for {n} modules")));
            }
            Some((0..n).map(|j| j == i && m.is_none_or(|m| m[j])).collect())
        }
        (_, m) => m.map(<[bool]>::to_vec),
    };
    if let Some(s) = &s {
        if !s.iter().any(|&k| k) {
            return Err(NnError::Config("every belief module is masked".into()));
        }
    }
    Ok(s)
}

/// Unnormalized fusion scores `[N, n]`.
pub(super) fn logits(g: &mut Graph<'_>, agent: &Agent, beliefs: &[NodeId], phi: NodeId) -> Result<NodeId> {
    let n = beliefs.len();
    let [rows, _] = g.shape(phi);
    match &agent.fusion {
        FusionLayer::Gate(lin) => lin.forward(g, phi),
        FusionLayer::Key(lin) => {
            let key = lin.forward(g, phi)?;
            let scores = beliefs
                .iter()
                .map(|&h| g.row_dot(h, key))
                .collect::<Result<Vec<_>>>()?;
            let s = g.concat_cols(&scores)?;
            g.scale(s, 1.0 / (n as f64).sqrt())
        }
        FusionLayer::None => g.constant(Tensor::zeros(rows, n)),
    }
}

pub(super) fn fuse(
    g: &mut Graph<'_>,
    agent: &Agent,
    beliefs: &[NodeId],
    phi: NodeId,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId)> {
    let n = beliefs.len();
    if n == 0 {
        return Err(NnError::Config("fusion needs at least one belief module".into()));
    }
    let support = support(agent.config.fusion.method, n, mask)?;
    let [rows, _] = g.shape(beliefs[0]);
    if n == 1 {
        let w = g.constant(Tensor::full(rows, 1, 1.0))?;
        return Ok((beliefs[0], w));
    }
    let l = logits(g, agent, beliefs, phi)?;
    let w = g.masked_softmax(l, support.as_deref())?;
    let mut fused = None;
    for (i, &h) in beliefs.iter().enumerate() {
        let wi = g.slice_cols(w, i, 1)?;
        let term = g.col_mul(h, wi)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((fused.expect("n > 1"), w))
}

/// Plain-vector fusion from given logits; mirrors the graph computation.
pub fn fuse_values(
    hidden: &[Vec<f64>],
    logits: &[f64],
    method: FusionMethod,
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = hidden.len();
    if n == 0 || logits.len() != n {
        return Err(NnError::Config(format!("{} logits for {n} modules", logits.len())));
    }
    let support = support(method, n, mask)?;
    if n == 1 {
        return Ok((hidden[0].clone(), vec![1.0]));
    }
    let live = |i: usize| support.as_ref().is_none_or(|s| s[i]);
    let logits: Vec<f64> = match method {
        FusionMethod::Fixed(_) | FusionMethod::Average => vec![0.0; n],
        _ => logits.to_vec(),
    };
    let max = (0..n).filter(|&i| live(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = (0..n)
        .map(|i| if live(i) { (logits[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    let mut fused = vec![0.0; hidden[0].len()];
    for (h, &wi) in hidden.iter().zip(&w) {
        for (f, &x) in fused.iter_mut().zip(h) {
            *f += x * wi;
        }
    }
    Ok((fused, w))
}

/// `Σ −p log p` with `p` clamped at 1e-12 inside the log.
pub fn attention_entropy(w: &[f64]) -> f64 {
    w.iter().map(|&p| -p * p.max(ENTROPY_CLAMP).ln()).sum()
}
