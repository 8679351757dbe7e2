//! Central finite-difference checks against the reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::error::Result;
use super::graph::{ConvGeometry, Graph, NodeId};
use super::layers::{Conv2d, Embedding, GruCell, Linear};
use super::params::{ParamGroup, ParamTape};
use super::tensor::Tensor;
use crate::parallel::{par_map, ExecMode};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_REL_TOL: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `backward` against central differences of the scalar built by
/// `build` for every scalar in the tape.
pub fn check<F>(tape: &ParamTape, step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(tape);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let mut probe = tape.clone();
    let eval = |probe: &ParamTape| -> Result<f64> {
        let mut g = Graph::new(probe);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut worst = (0.0, 0);
    for i in 0..tape.len() {
        let orig = probe.flat_values()[i];
        probe.flat_values_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.flat_values_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.flat_values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let e = rel_error(analytic[i], numeric);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: tape.len(),
    })
}

/// Every differentiable operation covered by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpCase {
    MatMul,
    AddSubMul,
    AddRow,
    Activations,
    ClampMinimum,
    ConcatSlice,
    GatherRows,
    ColMulRowDot,
    Reductions,
    Softmax,
    MaskedSoftmax,
    LogSoftmaxCrossEntropy,
    Bce,
    Entropy,
    Linear,
    Conv2d,
    GruUnroll,
    Embedding,
}

impl OpCase {
    pub const ALL: [OpCase; 18] = [
        OpCase::MatMul,
        OpCase::AddSubMul,
        OpCase::AddRow,
        OpCase::Activations,
        OpCase::ClampMinimum,
        OpCase::ConcatSlice,
        OpCase::GatherRows,
        OpCase::ColMulRowDot,
        OpCase::Reductions,
        OpCase::Softmax,
        OpCase::MaskedSoftmax,
        OpCase::LogSoftmaxCrossEntropy,
        OpCase::Bce,
        OpCase::Entropy,
        OpCase::Linear,
        OpCase::Conv2d,
        OpCase::GruUnroll,
        OpCase::Embedding,
    ];
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub op: OpCase,
    pub seed: u64,
    pub shape: String,
    pub check: GradCheck,
}

/// Values bounded away from zero so kinks (relu, clamp, min) are not probed.
fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
    let mag = rng.random_range(0.05..1.0);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn random_param(
    tape: &mut ParamTape,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> crate::nn::ParamId {
    let data = (0..rows * cols).map(|_| away_from_zero(rng)).collect();
    tape.add(name, Tensor::from_vec(rows, cols, data), ParamGroup::Main)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// `sum(x * R)` for a fixed random `R`, so every output element matters.
fn weighted_sum(g: &mut Graph<'_>, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

pub fn run_case(op: OpCase, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (op as u64).wrapping_mul(0x9E37_79B9));
    let m = rng.random_range(1..5);
    let n = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let mut tape = ParamTape::new();
    let shape;
    let check = match op {
        OpCase::MatMul => {
            let a = random_param(&mut tape, &mut rng, "a", m, k);
            let b = random_param(&mut tape, &mut rng, "b", k, n);
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{k} * {k}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul(a, b)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::AddSubMul => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let b = random_param(&mut tape, &mut rng, "b", m, n);
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let s = g.add(a, b)?;
                let d = g.sub(a, b)?;
                let p = g.mul(s, d)?;
                let p = g.mul(p, a)?;
                let p = g.scale(p, 0.7)?;
                let p = g.add_scalar(p, 0.3)?;
                weighted_sum(g, p, &r)
            })?
        }
        OpCase::AddRow => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let b = random_param(&mut tape, &mut rng, "b", 1, n);
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{n} + 1x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.add_row(a, b)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::Activations => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let t = g.tanh(a)?;
                let s = g.sigmoid(a)?;
                let e = g.exp(a)?;
                let rl = g.relu(a)?;
                let y = g.mul(t, s)?;
                let y = g.add(y, e)?;
                let y = g.add(y, rl)?;
                let ng = g.neg(a)?;
                let y = g.mul(y, ng)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::ClampMinimum => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let b = random_param(&mut tape, &mut rng, "b", m, n);
            // keep |a - b| away from zero so minimum picks a stable side
            let (av, bv) = (tape.view(a).to_tensor(), tape.view(b).to_tensor());
            for i in 0..av.len() {
                if (av.data()[i] - bv.data()[i]).abs() < 0.05 {
                    tape.flat_values_mut()[m * n + i] += 0.2;
                }
            }
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let c = g.clamp(a, -0.5, 0.5)?;
                let mn = g.minimum(a, b)?;
                let y = g.add(c, mn)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::ConcatSlice => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let b = random_param(&mut tape, &mut rng, "b", m, k);
            let r = random_tensor(&mut rng, 2 * m, n + k - 1);
            shape = format!("[{m}x{n} | {m}x{k}]");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b) = (g.param(a), g.param(b));
                let c = g.concat_cols(&[a, b])?;
                let s = g.slice_cols(c, 1, n + k - 1)?;
                let sq = g.mul(s, s)?;
                let stacked = g.concat_rows(&[s, sq])?;
                let lower = g.slice_rows(stacked, 0, 2 * m)?;
                weighted_sum(g, lower, &r)
            })?
        }
        OpCase::GatherRows => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let idx: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..m)).collect();
            let r = random_tensor(&mut rng, idx.len(), n);
            shape = format!("{m}x{n} gather {}", idx.len());
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let y = g.gather_rows(a, &idx)?;
                let y = g.mul(y, y)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::ColMulRowDot => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let b = random_param(&mut tape, &mut rng, "b", m, n);
            let c = random_param(&mut tape, &mut rng, "c", m, 1);
            let r = random_tensor(&mut rng, m, n);
            let r2 = random_tensor(&mut rng, m, 1);
            shape = format!("{m}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let (a, b, c) = (g.param(a), g.param(b), g.param(c));
                let y = g.col_mul(a, c)?;
                let d = g.row_dot(y, b)?;
                let s1 = weighted_sum(g, y, &r)?;
                let s2 = weighted_sum(g, d, &r2)?;
                g.add(s1, s2)
            })?
        }
        OpCase::Reductions => {
            let a = random_param(&mut tape, &mut rng, "a", m, n);
            let r = random_tensor(&mut rng, m, 1);
            shape = format!("{m}x{n}");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let sq = g.mul(a, a)?;
                let rs = g.sum_rows(sq)?;
                let s1 = weighted_sum(g, rs, &r)?;
                let mean = g.mean(a)?;
                let total = g.sum(a)?;
                let mt = g.mul(mean, total)?;
                g.add(s1, mt)
            })?
        }
        OpCase::Softmax => {
            let a = random_param(&mut tape, &mut rng, "a", m, n + 1);
            let r = random_tensor(&mut rng, m, n + 1);
            shape = format!("{m}x{}", n + 1);
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let s = g.softmax(a)?;
                weighted_sum(g, s, &r)
            })?
        }
        OpCase::MaskedSoftmax => {
            let cols = n + 2;
            let a = random_param(&mut tape, &mut rng, "a", m, cols);
            let mut mask: Vec<bool> = (0..cols).map(|_| rng.random::<bool>()).collect();
            mask[0] = true;
            let r = random_tensor(&mut rng, m, cols);
            shape = format!("{m}x{cols} mask {mask:?}");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let s = g.masked_softmax(a, Some(&mask))?;
                weighted_sum(g, s, &r)
            })?
        }
        OpCase::LogSoftmaxCrossEntropy => {
            let cols = n + 1;
            let a = random_param(&mut tape, &mut rng, "a", m, cols);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..cols)).collect();
            let r = random_tensor(&mut rng, m, cols);
            shape = format!("{m}x{cols}");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let ls = g.log_softmax(a)?;
                let s1 = weighted_sum(g, ls, &r)?;
                let ce = g.cross_entropy(a, &targets)?;
                let s2 = g.mean(ce)?;
                g.add(s1, s2)
            })?
        }
        OpCase::Bce => {
            let a = random_param(&mut tape, &mut rng, "a", m, 1);
            let targets: Vec<f64> = (0..m).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
            shape = format!("{m}x1");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let a = g.scale(a, 3.0)?;
                let l = g.bce_with_logits(a, &targets)?;
                g.sum(l)
            })?
        }
        OpCase::Entropy => {
            let cols = n + 1;
            let a = random_param(&mut tape, &mut rng, "a", m, cols);
            let r = random_tensor(&mut rng, m, 1);
            shape = format!("{m}x{cols}");
            check(&tape, DEFAULT_STEP, |g| {
                let a = g.param(a);
                let p = g.softmax(a)?;
                let h = g.entropy(p)?;
                weighted_sum(g, h, &r)
            })?
        }
        OpCase::Linear => {
            let lin = Linear::new(&mut tape, &mut rng, "lin", k, n, 1.0, ParamGroup::Main);
            randomize(&mut tape, &mut rng);
            let x = random_tensor(&mut rng, m, k);
            let r = random_tensor(&mut rng, m, n);
            shape = format!("{m}x{k} -> {n}");
            check(&tape, DEFAULT_STEP, |g| {
                let x = g.constant(x.clone())?;
                let y = lin.forward(g, x)?;
                let y = g.tanh(y)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::Conv2d => {
            let in_channels = rng.random_range(1..3);
            let kernel = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let h = kernel + rng.random_range(0..4);
            let w = kernel + rng.random_range(0..4);
            let geom = ConvGeometry {
                in_channels,
                height: h,
                width: w,
                out_channels: rng.random_range(1..4),
                kernel,
                stride,
            };
            let conv = Conv2d::new(&mut tape, &mut rng, "conv", geom, ParamGroup::Main);
            randomize(&mut tape, &mut rng);
            let xin = random_param(&mut tape, &mut rng, "x", m, geom.in_len());
            let r = random_tensor(&mut rng, m, geom.out_len());
            shape = format!("{geom:?} batch {m}");
            check(&tape, DEFAULT_STEP, |g| {
                let x = g.param(xin);
                let y = conv.forward(g, x)?;
                let y = g.tanh(y)?;
                weighted_sum(g, y, &r)
            })?
        }
        OpCase::GruUnroll => {
            let batch = rng.random_range(1..3);
            let steps = rng.random_range(1..5);
            let cell = GruCell::new(&mut tape, &mut rng, "gru", k, n, ParamGroup::Main);
            randomize(&mut tape, &mut rng);
            let h0 = random_param(&mut tape, &mut rng, "h0", batch, n);
            let x = random_tensor(&mut rng, steps * batch, k);
            let keep: Vec<f64> = (0..steps * batch)
                .map(|_| if rng.random_bool(0.25) { 0.0 } else { 1.0 })
                .collect();
            let r = random_tensor(&mut rng, steps * batch, n);
            shape = format!("in {k} hidden {n} batch {batch} steps {steps}");
            check(&tape, DEFAULT_STEP, |g| {
                let x = g.constant(x.clone())?;
                let h0 = g.param(h0);
                let hs = cell.unroll(g, x, h0, &keep, batch)?;
                weighted_sum(g, hs, &r)
            })?
        }
        OpCase::Embedding => {
            let emb = Embedding::new(&mut tape, &mut rng, "emb", m + 1, n, ParamGroup::Main);
            let idx: Vec<usize> = (0..k + 1).map(|_| rng.random_range(0..m + 1)).collect();
            let r = random_tensor(&mut rng, idx.len(), n);
            shape = format!("{}x{n} lookup {}", m + 1, idx.len());
            check(&tape, DEFAULT_STEP, |g| {
                let e = emb.forward(g, &idx)?;
                let e = g.tanh(e)?;
                weighted_sum(g, e, &r)
            })?
        }
    };
    Ok(CaseResult {
        op,
        seed,
        shape,
        check,
    })
}

fn randomize(tape: &mut ParamTape, rng: &mut ChaCha8Rng) {
    for v in tape.flat_values_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
}

/// Runs `seeds` random instances of every op case.
pub fn run_suite(base_seed: u64, seeds: u64, mode: ExecMode) -> Result<Vec<CaseResult>> {
    let jobs: Vec<(OpCase, u64)> = OpCase::ALL
        .iter()
        .flat_map(|&op| (0..seeds).map(move |s| (op, base_seed.wrapping_add(s))))
        .collect();
    par_map(mode, jobs, |(op, seed)| run_case(op, seed))
        .into_iter()
        .collect()
}
