use rand::Rng;
use serde::{Deserialize, Serialize};

use super::error::{shape_err, Result};
use super::graph::{ConvGeometry, Graph, NodeId};
use super::params::{init, ParamGroup, ParamId, ParamTape};
use super::tensor::Tensor;

/// `y = x W + b`, with `W` stored `[in, out]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform init scaled by `gain`; zero bias.
    pub fn new<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        group: ParamGroup,
    ) -> Self {
        let w = init::fan_in_uniform(rng, in_dim, out_dim, in_dim, gain);
        let weight = tape.add(format!("{name}.weight"), w, group);
        let bias = tape.add(format!("{name}.bias"), Tensor::zeros(1, out_dim), group);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    #[serde(with = "geom_serde")]
    pub geom: ConvGeometry,
}

mod geom_serde {
    use super::ConvGeometry;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct G {
        in_channels: usize,
        height: usize,
        width: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    }

    pub fn serialize<S: Serializer>(g: &ConvGeometry, s: S) -> Result<S::Ok, S::Error> {
        G {
            in_channels: g.in_channels,
            height: g.height,
            width: g.width,
            out_channels: g.out_channels,
            kernel: g.kernel,
            stride: g.stride,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ConvGeometry, D::Error> {
        let g = G::deserialize(d)?;
        Ok(ConvGeometry {
            in_channels: g.in_channels,
            height: g.height,
            width: g.width,
            out_channels: g.out_channels,
            kernel: g.kernel,
            stride: g.stride,
        })
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        rng: &mut R,
        name: &str,
        geom: ConvGeometry,
        group: ParamGroup,
    ) -> Self {
        let fan_in = geom.patch_len();
        let w = init::fan_in_uniform(rng, geom.out_channels, fan_in, fan_in, 1.0);
        let weight = tape.add(format!("{name}.weight"), w, group);
        let bias = tape.add(
            format!("{name}.bias"),
            Tensor::zeros(1, geom.out_channels),
            group,
        );
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.geom)
    }

    pub fn num_params(&self) -> usize {
        self.geom.out_channels * self.geom.patch_len() + self.geom.out_channels
    }
}

/// Lookup table `[count, dim]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        rng: &mut R,
        name: &str,
        count: usize,
        dim: usize,
        group: ParamGroup,
    ) -> Self {
        let t = init::fan_in_uniform(rng, count, dim, 1, 1.0);
        let table = tape.add(format!("{name}.table"), t, group);
        Self { table, count, dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, indices: &[usize]) -> Result<NodeId> {
        let t = g.param(self.table);
        g.gather_rows(t, indices)
    }
}

/// Single-layer GRU cell with gates ordered (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    /// Fan-in uniform input weights, orthogonal recurrent blocks, zero biases.
    pub fn new<R: Rng + ?Sized>(
        tape: &mut ParamTape,
        rng: &mut R,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        group: ParamGroup,
    ) -> Self {
        let h = hidden_size;
        let wi = init::fan_in_uniform(rng, input_size, 3 * h, input_size, 1.0);
        let mut wh = Tensor::zeros(h, 3 * h);
        for gate in 0..3 {
            let q = init::orthogonal(rng, h);
            for r in 0..h {
                for c in 0..h {
                    wh.set(r, gate * h + c, q.get(r, c));
                }
            }
        }
        Self {
            w_input: tape.add(format!("{name}.w_input"), wi, group),
            w_hidden: tape.add(format!("{name}.w_hidden"), wh, group),
            b_input: tape.add(format!("{name}.b_input"), Tensor::zeros(1, 3 * h), group),
            b_hidden: tape.add(format!("{name}.b_hidden"), Tensor::zeros(1, 3 * h), group),
            input_size,
            hidden_size,
        }
    }

    pub fn num_params(&self) -> usize {
        let h = self.hidden_size;
        3 * h * (self.input_size + h) + 6 * h
    }

    /// Input projection `x W_i + b_i` for any number of rows.
    pub fn project_input(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let [_, cols] = g.shape(x);
        if cols != self.input_size {
            return shape_err(
                "gru",
                format!("input width {cols} != {}", self.input_size),
            );
        }
        let w = g.param(self.w_input);
        let b = g.param(self.b_input);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// One step from a precomputed input projection `[B, 3H]`.
    pub fn step_projected(&self, g: &mut Graph<'_>, xp: NodeId, h: NodeId) -> Result<NodeId> {
        let hs = self.hidden_size;
        let [rows, cols] = g.shape(h);
        if cols != hs || g.shape(xp) != [rows, 3 * hs] {
            return shape_err("gru", format!("hidden {rows}x{cols} for hidden size {hs}"));
        }
        let wh = g.param(self.w_hidden);
        let bh = g.param(self.b_hidden);
        let hp = g.matmul(h, wh)?;
        let hp = g.add_row(hp, bh)?;
        let xr = g.slice_cols(xp, 0, hs)?;
        let xz = g.slice_cols(xp, hs, hs)?;
        let xn = g.slice_cols(xp, 2 * hs, hs)?;
        let hr = g.slice_cols(hp, 0, hs)?;
        let hz = g.slice_cols(hp, hs, hs)?;
        let hn = g.slice_cols(hp, 2 * hs, hs)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        // h' = n + z * (h - n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }

    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId) -> Result<NodeId> {
        let xp = self.project_input(g, x)?;
        self.step_projected(g, xp, h)
    }

    /// Unrolls over `steps` time steps of `batch` rows each. Inputs are
    /// time-major (`row = t * batch + b`). `keep[t * batch + b]` is 0.0 where
    /// an episode starts at step `t`, which zeroes the carried hidden state.
    /// Returns all hidden states, time-major, `[steps * batch, H]`.
    pub fn unroll(
        &self,
        g: &mut Graph<'_>,
        inputs: NodeId,
        h0: NodeId,
        keep: &[f64],
        batch: usize,
    ) -> Result<NodeId> {
        let [rows, _] = g.shape(inputs);
        if batch == 0 || rows % batch != 0 || keep.len() != rows {
            return shape_err(
                "gru_unroll",
                format!("{rows} input rows, {} mask entries, batch {batch}", keep.len()),
            );
        }
        if g.shape(h0) != [batch, self.hidden_size] {
            return shape_err("gru_unroll", "initial hidden state shape");
        }
        let steps = rows / batch;
        let xp_all = self.project_input(g, inputs)?;
        let mut h = h0;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mask = &keep[t * batch..(t + 1) * batch];
            if mask.iter().any(|&m| m != 1.0) {
                let m = g.constant(Tensor::column(mask.to_vec()))?;
                h = g.col_mul(h, m)?;
            }
            let xp = g.slice_rows(xp_all, t * batch, batch)?;
            h = self.step_projected(g, xp, h)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}
