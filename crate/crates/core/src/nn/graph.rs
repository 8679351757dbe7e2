//! Tape-style reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Parameters are read directly from a borrowed [`ParamTape`]; calling
//! [`Graph::backward`] returns a flat gradient aligned with the tape's
//! flat parameter view. Parameters that do not participate in the loss
//! receive exactly zero.

use super::error::{shape_err, NnError, Result};
use super::params::{ParamId, ParamTape};
use super::tensor::{gemm, Tensor, View};

/// Clamp applied to probabilities before taking logs in entropy terms.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution without padding. Inputs are rows holding
/// a channel-major `[channels, height, width]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    ColMul(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    PickCols(NodeId, Vec<usize>),
    BceWithLogits(NodeId, Vec<f64>),
    Entropy(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ColMul(..) => "col_mul",
            Op::RowDot(..) => "row_dot",
            Op::SumRows(_) => "sum_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::PickCols(..) => "pick_cols",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Entropy(_) => "entropy",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'t> {
    tape: &'t ParamTape,
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Graph<'t> {
    pub fn new(tape: &'t ParamTape) -> Self {
        Self {
            tape,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn tape(&self) -> &'t ParamTape {
        self.tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> View<'_> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t.view(),
            Value::Param(p) => self.tape.view(*p),
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        self.value(id).to_tensor()
    }

    /// Value of a `[1,1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.data.len(), 1);
        v.data[0]
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        let v = self.value(id);
        [v.rows, v.cols]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(NnError::NonFinite {
                op: op.name(),
                node,
            });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Ok(NodeId(node))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols != bv.rows {
            return shape_err(
                "matmul",
                format!("{}x{} * {}x{}", av.rows, av.cols, bv.rows, bv.cols),
            );
        }
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm(
            av.rows,
            av.cols,
            bv.cols,
            av.data,
            false,
            bv.data,
            false,
            out.data_mut(),
        );
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows || av.cols != bv.cols {
            return shape_err(
                name,
                format!("{}x{} vs {}x{}", av.rows, av.cols, bv.rows, bv.cols),
            );
        }
        let data = av.data.iter().zip(bv.data).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_vec(av.rows, av.cols, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same(a, b, "minimum", f64::min)?;
        self.push(out, Op::Minimum(a, b))
    }

    /// `a [m,n] + row [1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows != 1 || rv.cols != av.cols {
            return shape_err(
                "add_row",
                format!("{}x{} + {}x{}", av.rows, av.cols, rv.rows, rv.cols),
            );
        }
        let mut out = av.to_tensor();
        for r in 0..av.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data) {
                *o += *b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| f(*x)).collect())
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.map(a, |x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let out = self.map(a, |x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows != rows {
                return shape_err("concat_cols", format!("row count {} vs {rows}", v.rows));
            }
            cols += v.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + width > av.cols {
            return shape_err(
                "slice_cols",
                format!("{start}+{width} exceeds {} columns", av.cols),
            );
        }
        let mut out = Tensor::zeros(av.rows, width);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return shape_err("concat_rows", format!("column count {} vs {cols}", v.cols));
            }
            data.extend_from_slice(v.data);
            rows += v.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let av = self.value(a);
        if start + count > av.rows {
            return shape_err(
                "slice_rows",
                format!("{start}+{count} exceeds {} rows", av.rows),
            );
        }
        let data = av.data[start * av.cols..(start + count) * av.cols].to_vec();
        self.push(Tensor::from_vec(count, av.cols, data), Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows) {
            return shape_err("gather_rows", format!("index {bad} out of {} rows", av.rows));
        }
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        self.push(
            Tensor::from_vec(indices.len(), av.cols, data),
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    /// Scales each row of `a [m,n]` by the matching entry of `c [m,1]`.
    pub fn col_mul(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols != 1 || cv.rows != av.rows {
            return shape_err(
                "col_mul",
                format!("{}x{} by {}x{}", av.rows, av.cols, cv.rows, cv.cols),
            );
        }
        let mut out = av.to_tensor();
        for r in 0..av.rows {
            let s = cv.data[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(out, Op::ColMul(a, c))
    }

    /// Row-wise inner product, `[m,n] . [m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows || av.cols != bv.cols {
            return shape_err(
                "row_dot",
                format!("{}x{} vs {}x{}", av.rows, av.cols, bv.rows, bv.cols),
            );
        }
        let data = (0..av.rows)
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        self.push(Tensor::column(data), Op::RowDot(a, b))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        self.push(Tensor::column(data), Op::SumRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.data.is_empty() {
            return shape_err("mean", "empty input");
        }
        let s = av.data.iter().sum::<f64>() / av.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.masked_softmax(a, None)
    }

    /// Row-wise softmax where columns with `mask[c] == false` are treated as
    /// logits of negative infinity: their probability is exactly zero and the
    /// remaining columns renormalise.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(m) = mask {
            if m.len() != av.cols {
                return shape_err("softmax", format!("mask of {} for {} columns", m.len(), av.cols));
            }
            if !m.iter().any(|&k| k) {
                return Err(NnError::Config("softmax with every column masked".into()));
            }
        }
        let keep = |c: usize| mask.is_none_or(|m| m[c]);
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let max = (0..av.cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let o = out.row_mut(r);
            for c in 0..row.len() {
                if keep(c) {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            o.iter_mut().for_each(|x| *x /= z);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            let row = av.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// `out[r] = a[r, indices[r]]`.
    pub fn pick_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if indices.len() != av.rows {
            return shape_err("pick_cols", format!("{} indices for {} rows", indices.len(), av.rows));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.cols) {
            return shape_err("pick_cols", format!("index {bad} out of {} columns", av.cols));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        self.push(Tensor::column(data), Op::PickCols(a, indices.to_vec()))
    }

    /// Per-row cross-entropy of logits against class indices, `[m,1]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lp = self.log_softmax(logits)?;
        let picked = self.pick_cols(lp, targets)?;
        self.neg(picked)
    }

    /// Per-row binary cross-entropy of `[m,1]` logits against targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let av = self.value(logits);
        if av.cols != 1 || av.rows != targets.len() {
            return shape_err(
                "bce_with_logits",
                format!("{}x{} logits for {} targets", av.rows, av.cols, targets.len()),
            );
        }
        let data = av
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| softplus(x) - t * x)
            .collect();
        self.push(Tensor::column(data), Op::BceWithLogits(logits, targets.to_vec()))
    }

    /// Per-row Shannon entropy of probability rows, `[m,1]`, with
    /// probabilities clamped at [`ENTROPY_CLAMP`] inside the log.
    pub fn entropy(&mut self, p: NodeId) -> Result<NodeId> {
        let pv = self.value(p);
        let data = (0..pv.rows)
            .map(|r| {
                pv.row(r)
                    .iter()
                    .map(|&x| -x * x.max(ENTROPY_CLAMP).ln())
                    .sum()
            })
            .collect();
        self.push(Tensor::column(data), Op::Entropy(p))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != geom.in_len() {
            return shape_err("conv2d", format!("input width {} != {}", xv.cols, geom.in_len()));
        }
        if wv.rows != geom.out_channels || wv.cols != geom.patch_len() {
            return shape_err(
                "conv2d",
                format!(
                    "weight {}x{} != {}x{}",
                    wv.rows,
                    wv.cols,
                    geom.out_channels,
                    geom.patch_len()
                ),
            );
        }
        if bv.rows != 1 || bv.cols != geom.out_channels {
            return shape_err("conv2d", format!("bias {}x{}", bv.rows, bv.cols));
        }
        let batch = xv.rows;
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let positions = oh * ow;
        let k = geom.patch_len();
        let mut cols = vec![0.0; batch * positions * k];
        for s in 0..batch {
            let img = xv.row(s);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[((s * positions) + oy * ow + ox) * k..][..k];
                    let mut idx = 0;
                    for c in 0..geom.in_channels {
                        for ky in 0..geom.kernel {
                            let iy = oy * geom.stride + ky;
                            let base = (c * geom.height + iy) * geom.width + ox * geom.stride;
                            row[idx..idx + geom.kernel]
                                .copy_from_slice(&img[base..base + geom.kernel]);
                            idx += geom.kernel;
                        }
                    }
                }
            }
        }
        let co = geom.out_channels;
        let mut res = vec![0.0; batch * positions * co];
        gemm(batch * positions, k, co, &cols, false, wv.data, true, &mut res);
        let mut out = Tensor::zeros(batch, geom.out_len());
        for s in 0..batch {
            let orow = out.row_mut(s);
            for p in 0..positions {
                for c in 0..co {
                    orow[c * positions + p] = res[(s * positions + p) * co + c] + bv.data[c];
                }
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Returns the gradient for every
    /// parameter in the tape as one flat vector.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return shape_err("backward", format!("loss is {}x{}, not scalar", lv.rows, lv.cols));
        }
        let mut flat = vec![0.0; self.tape.len()];
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let out = self.value(NodeId(i));
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    let range = self.tape.info(*p).range();
                    for (f, g) in flat[range].iter_mut().zip(&gout) {
                        *f += *g;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows, av.cols, bv.cols);
                    let ga = acc(&mut grads, *a, m * k);
                    gemm(m, n, k, &gout, false, bv.data, true, ga);
                    let gb = acc(&mut grads, *b, k * n);
                    gemm(k, m, n, av.data, true, &gout, false, gb);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, gout.len()), &gout);
                    add_into(acc(&mut grads, *b, gout.len()), &gout);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, gout.len()), &gout);
                    let gb = acc(&mut grads, *b, gout.len());
                    gb.iter_mut().zip(&gout).for_each(|(x, g)| *x -= g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), y) in ga.iter_mut().zip(&gout).zip(bv.data) {
                        *x += g * y;
                    }
                    let gb = acc(&mut grads, *b, gout.len());
                    for ((x, g), y) in gb.iter_mut().zip(&gout).zip(av.data) {
                        *x += g * y;
                    }
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let pick_a: Vec<bool> =
                        av.data.iter().zip(bv.data).map(|(x, y)| x <= y).collect();
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), &pa) in ga.iter_mut().zip(&gout).zip(&pick_a) {
                        if pa {
                            *x += g;
                        }
                    }
                    let gb = acc(&mut grads, *b, gout.len());
                    for ((x, g), &pa) in gb.iter_mut().zip(&gout).zip(&pick_a) {
                        if !pa {
                            *x += g;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, gout.len()), &gout);
                    let cols = out.cols;
                    let gr = acc(&mut grads, *row, cols);
                    for chunk in gout.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, gout.len());
                    ga.iter_mut().zip(&gout).for_each(|(x, g)| *x += g * s);
                }
                Op::AddScalar(a) => add_into(acc(&mut grads, *a, gout.len()), &gout),
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), y) in ga.iter_mut().zip(&gout).zip(out.data) {
                        *x += g * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), y) in ga.iter_mut().zip(&gout).zip(out.data) {
                        *x += g * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), y) in ga.iter_mut().zip(&gout).zip(out.data) {
                        if *y > 0.0 {
                            *x += g;
                        }
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), y) in ga.iter_mut().zip(&gout).zip(out.data) {
                        *x += g * y;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, gout.len());
                    for ((x, g), v) in ga.iter_mut().zip(&gout).zip(av.data) {
                        if *v >= *lo && *v <= *hi {
                            *x += g;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = out.rows;
                    let total = out.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let gp = acc(&mut grads, p, rows * w);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &gout[r * total + offset..r * total + offset + w],
                            );
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (rows, w, full) = (out.rows, out.cols, av.cols);
                    let ga = acc(&mut grads, *a, rows * full);
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * full + start..r * full + start + w],
                            &gout[r * w..(r + 1) * w],
                        );
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).data.len();
                        add_into(acc(&mut grads, p, n), &gout[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let n = av.data.len();
                    let ga = acc(&mut grads, *a, n);
                    let off = start * av.cols;
                    add_into(&mut ga[off..off + gout.len()], &gout);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let cols = av.cols;
                    let ga = acc(&mut grads, *a, av.data.len());
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut ga[src * cols..(src + 1) * cols],
                            &gout[r * cols..(r + 1) * cols],
                        );
                    }
                }
                Op::ColMul(a, c) => {
                    let (av, cv) = (self.value(*a), self.value(*c));
                    let cols = av.cols;
                    let ga = acc(&mut grads, *a, av.data.len());
                    for r in 0..av.rows {
                        let s = cv.data[r];
                        for (x, g) in ga[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&gout[r * cols..(r + 1) * cols])
                        {
                            *x += g * s;
                        }
                    }
                    let gc = acc(&mut grads, *c, av.rows);
                    for r in 0..av.rows {
                        gc[r] += gout[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(av.row(r))
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                    }
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let cols = av.cols;
                    let ga = acc(&mut grads, *a, av.data.len());
                    for r in 0..av.rows {
                        for (x, y) in ga[r * cols..(r + 1) * cols].iter_mut().zip(bv.row(r)) {
                            *x += gout[r] * y;
                        }
                    }
                    let gb = acc(&mut grads, *b, bv.data.len());
                    for r in 0..av.rows {
                        for (x, y) in gb[r * cols..(r + 1) * cols].iter_mut().zip(av.row(r)) {
                            *x += gout[r] * y;
                        }
                    }
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let cols = av.cols;
                    let ga = acc(&mut grads, *a, av.data.len());
                    for r in 0..av.rows {
                        ga[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|x| *x += gout[r]);
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).data.len();
                    acc(&mut grads, *a, n).iter_mut().for_each(|x| *x += gout[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).data.len();
                    let g = gout[0] / n as f64;
                    acc(&mut grads, *a, n).iter_mut().for_each(|x| *x += g);
                }
                Op::Softmax(a) => {
                    let cols = out.cols;
                    let ga = acc(&mut grads, *a, out.data.len());
                    for r in 0..out.rows {
                        let y = out.row(r);
                        let g = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (g[c] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let cols = out.cols;
                    let ga = acc(&mut grads, *a, out.data.len());
                    for r in 0..out.rows {
                        let y = out.row(r);
                        let g = &gout[r * cols..(r + 1) * cols];
                        let gsum: f64 = g.iter().sum();
                        for c in 0..cols {
                            ga[r * cols + c] += g[c] - y[c].exp() * gsum;
                        }
                    }
                }
                Op::PickCols(a, idx) => {
                    let av = self.value(*a);
                    let cols = av.cols;
                    let ga = acc(&mut grads, *a, av.data.len());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * cols + c] += gout[r];
                    }
                }
                Op::BceWithLogits(a, targets) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, av.data.len());
                    for r in 0..av.rows {
                        ga[r] += gout[r] * (sigmoid(av.data[r]) - targets[r]);
                    }
                }
                Op::Entropy(p) => {
                    let pv = self.value(*p);
                    let cols = pv.cols;
                    let gp = acc(&mut grads, *p, pv.data.len());
                    for r in 0..pv.rows {
                        for c in 0..cols {
                            let x = pv.data[r * cols + c];
                            let d = if x > ENTROPY_CLAMP {
                                -(x.ln() + 1.0)
                            } else {
                                -ENTROPY_CLAMP.ln()
                            };
                            gp[r * cols + c] += gout[r] * d;
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let wv = self.value(*w);
                    let batch = out.rows;
                    let positions = geom.out_height() * geom.out_width();
                    let co = geom.out_channels;
                    let k = geom.patch_len();
                    let mut dres = vec![0.0; batch * positions * co];
                    for s in 0..batch {
                        for c in 0..co {
                            for p in 0..positions {
                                dres[(s * positions + p) * co + c] =
                                    gout[s * out.cols + c * positions + p];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, co);
                    for chunk in dres.chunks(co) {
                        add_into(gb, chunk);
                    }
                    let gw = acc(&mut grads, *w, co * k);
                    gemm(co, batch * positions, k, &dres, true, cols, false, gw);
                    let mut dcols = vec![0.0; batch * positions * k];
                    gemm(batch * positions, co, k, &dres, false, wv.data, false, &mut dcols);
                    let gx = acc(&mut grads, *x, batch * geom.in_len());
                    let ow = geom.out_width();
                    for s in 0..batch {
                        let img = &mut gx[s * geom.in_len()..(s + 1) * geom.in_len()];
                        for oy in 0..geom.out_height() {
                            for ox in 0..ow {
                                let row = &dcols[((s * positions) + oy * ow + ox) * k..][..k];
                                let mut idx = 0;
                                for c in 0..geom.in_channels {
                                    for ky in 0..geom.kernel {
                                        let iy = oy * geom.stride + ky;
                                        let base = (c * geom.height + iy) * geom.width
                                            + ox * geom.stride;
                                        add_into(
                                            &mut img[base..base + geom.kernel],
                                            &row[idx..idx + geom.kernel],
                                        );
                                        idx += geom.kernel;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(flat)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
