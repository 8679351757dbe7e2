//! Fusion invariants as reusable property bodies over random inputs.

use std::sync::OnceLock;

use auxnav::agent::{fuse_values, Agent, AgentConfig, FusionLayer, FusionMethod};
use auxnav::nn::{Graph, Tensor};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const EMBED: usize = 8;
pub const HIDDEN: usize = 6;
pub const MAX_MODULES: usize = 5;

#[derive(Debug, Clone)]
pub struct FusionCase {
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub mask: Vec<bool>,
    pub shift: f64,
    pub phi: Vec<f64>,
    pub other_phi: Vec<f64>,
    /// Index guaranteed to be unmasked, also used as the fixed index.
    pub pick: usize,
}

impl FusionCase {
    pub fn n(&self) -> usize {
        self.hidden.len()
    }
}

pub fn case() -> impl Strategy<Value = FusionCase> {
    (1..=MAX_MODULES).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, HIDDEN), n),
            prop::collection::vec(-6.0..6.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            -50.0..50.0f64,
            prop::collection::vec(0.0..2.0f64, EMBED),
            prop::collection::vec(0.0..2.0f64, EMBED),
            0..n,
        )
            .prop_map(|(hidden, logits, mut mask, shift, phi, other_phi, pick)| {
                mask[pick] = true;
                FusionCase {
                    hidden,
                    logits,
                    mask,
                    shift,
                    phi,
                    other_phi,
                    pick,
                }
            })
    })
}

pub fn methods(pick: usize) -> [FusionMethod; 4] {
    [
        FusionMethod::Fixed(pick),
        FusionMethod::Average,
        FusionMethod::SoftmaxGate,
        FusionMethod::DotAttention,
    ]
}

fn small_config(n: usize, method: FusionMethod) -> AgentConfig {
    let mut cfg = AgentConfig::single(Vec::new(), 11 + n as u64);
    cfg.embedding_size = EMBED;
    cfg.belief.hidden = HIDDEN;
    cfg.belief.count = n;
    cfg.encoder.view_size = 7;
    cfg.fusion.method = method;
    cfg
}

/// Agents for every `(method, n)`; fixed agents are built per index.
fn agent(n: usize, method: FusionMethod) -> &'static Agent {
    static AGENTS: OnceLock<Vec<Agent>> = OnceLock::new();
    let all = AGENTS.get_or_init(|| {
        let mut v = Vec::new();
        for n in 1..=MAX_MODULES {
            for m in [FusionMethod::Average, FusionMethod::SoftmaxGate, FusionMethod::DotAttention] {
                v.push(Agent::new(small_config(n, m)).expect("agent"));
            }
            for i in 0..MAX_MODULES {
                let i = i.min(n - 1);
                v.push(Agent::new(small_config(n, FusionMethod::Fixed(i))).expect("agent"));
            }
        }
        v
    });
    let per_n = 3 + MAX_MODULES;
    let slot = match method {
        FusionMethod::Average => 0,
        FusionMethod::SoftmaxGate => 1,
        FusionMethod::DotAttention => 2,
        FusionMethod::Fixed(i) => 3 + i,
    };
    &all[(n - 1) * per_n + slot]
}

/// Runs the agent's fusion in the graph on one row.
pub fn graph_fuse(
    n: usize,
    method: FusionMethod,
    hidden: &[Vec<f64>],
    phi: &[f64],
    mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>), auxnav::nn::NnError> {
    let a = agent(n, method);
    let mut g = Graph::new(&a.tape);
    let p = g.constant(Tensor::row_vector(phi.to_vec()))?;
    let hs = hidden
        .iter()
        .map(|h| g.constant(Tensor::row_vector(h.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (fused, w) = a.fuse(&mut g, &hs, p, mask)?;
    Ok((g.value(fused).data.to_vec(), g.value(w).data.to_vec()))
}

fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn check_simplex(w: &[f64], mask: Option<&[bool]>) -> Result<(), TestCaseError> {
    let sum: f64 = w.iter().sum();
    prop_assert!((sum - 1.0).abs() < 1e-12, "weights {:?} sum to {}", w, sum);
    for (i, &x) in w.iter().enumerate() {
        prop_assert!((0.0..=1.0).contains(&x), "weight {} = {}", i, x);
        if let Some(m) = mask {
            if !m[i] {
                prop_assert!(x == 0.0, "masked weight {} = {}", i, x);
            }
        }
    }
    Ok(())
}

/// Weights lie on the simplex, masked or not, for every method, both in
/// the graph and for arbitrary logits.
pub fn simplex(c: &FusionCase) -> Result<(), TestCaseError> {
    let n = c.n();
    for method in methods(c.pick) {
        for mask in [None, Some(c.mask.as_slice())] {
            let (_, w) = graph_fuse(n, method, &c.hidden, &c.phi, mask).map_err(fail)?;
            check_simplex(&w, mask)?;
            let (_, w) = fuse_values(&c.hidden, &c.logits, method, mask).map_err(fail)?;
            check_simplex(&w, mask)?;
        }
    }
    Ok(())
}

fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

/// Adding a constant to every logit changes neither the weights nor their
/// argmax.
pub fn shift_invariance(c: &FusionCase) -> Result<(), TestCaseError> {
    let shifted: Vec<f64> = c.logits.iter().map(|l| l + c.shift).collect();
    for method in methods(c.pick) {
        let (_, a) = fuse_values(&c.hidden, &c.logits, method, Some(&c.mask)).map_err(fail)?;
        let (_, b) = fuse_values(&c.hidden, &shifted, method, Some(&c.mask)).map_err(fail)?;
        prop_assert_eq!(argmax(&a), argmax(&b));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", a, b);
        }
    }
    Ok(())
}

/// With one belief module every method is the identity with weight 1.
pub fn single_module_identity(c: &FusionCase) -> Result<(), TestCaseError> {
    let h = vec![c.hidden[0].clone()];
    for method in methods(0) {
        let (fused, w) = graph_fuse(1, method, &h, &c.phi, None).map_err(fail)?;
        prop_assert_eq!(&fused, &h[0]);
        prop_assert_eq!(w, vec![1.0]);
        let (fused, w) = fuse_values(&h, &c.logits[..1], method, None).map_err(fail)?;
        prop_assert_eq!(&fused, &h[0]);
        prop_assert_eq!(w, vec![1.0]);
    }
    Ok(())
}

/// Fixed and average fusion own no parameters and ignore φ; their weights
/// are the exact one-hot and uniform vectors.
pub fn parameter_free(c: &FusionCase) -> Result<(), TestCaseError> {
    let n = c.n();
    for method in [FusionMethod::Fixed(c.pick), FusionMethod::Average] {
        let a = agent(n, method);
        prop_assert!(matches!(a.fusion, FusionLayer::None));
        prop_assert!(!a.tape.infos().iter().any(|p| p.name.starts_with("fusion")));
        let (f1, w1) = graph_fuse(n, method, &c.hidden, &c.phi, None).map_err(fail)?;
        let (f2, w2) = graph_fuse(n, method, &c.hidden, &c.other_phi, None).map_err(fail)?;
        prop_assert_eq!(&f1, &f2);
        prop_assert_eq!(&w1, &w2);
        let expect: Vec<f64> = match method {
            FusionMethod::Fixed(i) => (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect(),
            _ => vec![1.0 / n as f64; n],
        };
        for (x, y) in w1.iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-15, "{:?} vs {:?}", w1, expect);
        }
        for k in 0..HIDDEN {
            let want: f64 = (0..n).map(|i| expect[i] * c.hidden[i][k]).sum();
            prop_assert!((f1[k] - want).abs() < 1e-12);
        }
    }
    Ok(())
}

/// Masking equals renormalizing the unmasked weights of the full fusion.
pub fn mask_renormalization(c: &FusionCase) -> Result<(), TestCaseError> {
    let n = c.n();
    for method in methods(c.pick) {
        let (_, full) = graph_fuse(n, method, &c.hidden, &c.phi, None).map_err(fail)?;
        let (fused, masked) = graph_fuse(n, method, &c.hidden, &c.phi, Some(&c.mask)).map_err(fail)?;
        check_renormalized(&full, &masked, &c.mask)?;
        for k in 0..HIDDEN {
            let want: f64 = (0..n).map(|i| masked[i] * c.hidden[i][k]).sum();
            prop_assert!((fused[k] - want).abs() < 1e-12);
        }
        let (_, full) = fuse_values(&c.hidden, &c.logits, method, None).map_err(fail)?;
        let (_, masked) = fuse_values(&c.hidden, &c.logits, method, Some(&c.mask)).map_err(fail)?;
        check_renormalized(&full, &masked, &c.mask)?;
    }
    Ok(())
}

pub fn check_renormalized(full: &[f64], masked: &[f64], mask: &[bool]) -> Result<(), TestCaseError> {
    let kept: f64 = full.iter().zip(mask).filter(|(_, &m)| m).map(|(w, _)| w).sum();
    for i in 0..full.len() {
        let want = if mask[i] { full[i] / kept } else { 0.0 };
        prop_assert!((masked[i] - want).abs() < 1e-12, "{:?} -> {:?} under {:?}", full, masked, mask);
    }
    Ok(())
}

/// Every property with its name, for runners that iterate over them.
#[allow(clippy::type_complexity)]
pub const ALL: [(&str, fn(&FusionCase) -> Result<(), TestCaseError>); 5] = [
    ("simplex", simplex),
    ("shift invariance", shift_invariance),
    ("single-module identity", single_module_identity),
    ("parameter freedom", parameter_free),
    ("mask renormalization", mask_renormalization),
];
