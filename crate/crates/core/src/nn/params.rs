use rand::Rng;
use serde::{Deserialize, Serialize};

use super::error::{NnError, Result};
use super::tensor::{Tensor, View};

/// Index of a parameter tensor in a [`ParamTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the model a parameter belongs to: the policy network
/// (encoder, beliefs, fusion, head) or an auxiliary decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Main,
    Aux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub group: ParamGroup,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.1,
        }
    }
}

/// Flat parameter store with gradient accumulators and Adam moments.
///
/// All parameters live in one contiguous buffer so that gradient clipping,
/// optimizer steps and checkpointing work on a single flat view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTape {
    infos: Vec<ParamInfo>,
    values: Vec<f64>,
    grads: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    step: u64,
}

impl Default for ParamTape {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamTape {
    pub fn new() -> Self {
        Self {
            infos: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, init: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let offset = self.values.len();
        let n = init.len();
        self.infos.push(ParamInfo {
            name,
            rows: init.rows(),
            cols: init.cols(),
            offset,
            group,
        });
        self.values.extend_from_slice(init.data());
        self.grads.resize(offset + n, 0.0);
        self.adam_m.resize(offset + n, 0.0);
        self.adam_v.resize(offset + n, 0.0);
        ParamId(self.infos.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn num_params(&self) -> usize {
        self.infos.len()
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.infos
            .iter()
            .filter(|p| p.group == group)
            .map(ParamInfo::len)
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn view(&self, id: ParamId) -> View<'_> {
        let info = &self.infos[id.0];
        View {
            rows: info.rows,
            cols: info.cols,
            data: &self.values[info.range()],
        }
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.infos[id.0].range();
        &mut self.values[r]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[self.infos[id.0].range()]
    }

    pub fn flat_values(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn flat_grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn flat_grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds a flat gradient (as returned by backward) into the accumulators.
    pub fn accumulate(&mut self, grads: &[f64]) {
        assert_eq!(grads.len(), self.grads.len(), "flat gradient length");
        for (a, b) in self.grads.iter_mut().zip(grads) {
            *a += *b;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            self.grads.iter_mut().for_each(|g| *g *= scale);
        }
        norm
    }

    /// One Adam update with bias correction using the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.values.is_empty() {
            return Err(NnError::Config("adam step on an empty tape".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..self.values.len() {
            let g = self.grads[i];
            let m = cfg.beta1 * self.adam_m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            self.adam_m[i] = m;
            self.adam_v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            self.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }

    pub fn adam_moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let r = self.infos[id.0].range();
        (&self.adam_m[r.clone()], &self.adam_v[r])
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// Uniform in `±gain/sqrt(fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(
        rng: &mut R,
        rows: usize,
        cols: usize,
        fan_in: usize,
        gain: f64,
    ) -> Tensor {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Square orthogonal matrix from Gram-Schmidt on a Gaussian sample.
    pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
        let mut q = vec![vec![0.0; n]; n];
        for i in 0..n {
            loop {
                let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
                for prev in q.iter().take(i) {
                    let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    v.iter_mut().for_each(|a| *a /= norm);
                    q[i] = v;
                    break;
                }
            }
        }
        Tensor::from_vec(n, n, q.into_iter().flatten().collect())
    }
}
