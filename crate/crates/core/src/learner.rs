//! Differentiable models over a flat parameter vector.
//!
//! Two model kinds are supported: multinomial logistic regression and a
//! one-hidden-layer MLP with `tanh` activation (smooth everywhere, so finite
//! difference checks hold at every point).
//!
//! Parameter layout, layer by layer: the weight matrix in row-major order
//! (`out x in`), then the bias vector. For the MLP this is
//! `[W1 (hidden x input), b1, W2 (classes x hidden), b2]`.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Flat model parameters. Control variates and model deltas share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        ParamVector(vec![0.0; d])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        debug_assert_eq!(self.0.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(other) {
            *s += alpha * o;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    /// Element-wise `self - other` as a new vector.
    pub fn sub(&self, other: &[f64]) -> ParamVector {
        ParamVector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Fails on the first NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.0[index],
            }),
            None => Ok(()),
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp { hidden_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp { hidden_dim },
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "model needs input_dim >= 1 and num_classes >= 2, got {self:?}"
            )));
        }
        if let ModelKind::Mlp { hidden_dim: 0 } = self.kind {
            return Err(Error::InvalidArgument("MLP hidden_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Logistic => vec![(self.input_dim, self.num_classes)],
            ModelKind::Mlp { hidden_dim } => {
                vec![(self.input_dim, hidden_dim), (hidden_dim, self.num_classes)]
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Index range of every parameter tensor (weights, then biases, per
    /// layer). Quantization groups follow this layout.
    pub fn tensor_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut at = 0;
        for (fan_in, fan_out) in self.layers() {
            out.push(at..at + fan_in * fan_out);
            at += fan_in * fan_out;
            out.push(at..at + fan_out);
            at += fan_out;
        }
        out
    }

    fn check(&self, theta: &[f64], ds: &Dataset) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: theta.len(),
            });
        }
        if ds.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: ds.dim(),
            });
        }
        Ok(())
    }
}

/// Seeded Gaussian initialization with std `1/sqrt(fan_in)`; biases zero.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let mut theta = Vec::with_capacity(spec.num_params());
    for (fan_in, fan_out) in spec.layers() {
        let std = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let z: f64 = StandardNormal.sample(rng);
            theta.push(std * z);
        }
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(theta)
}

/// A mini-batch: indices into a dataset, possibly repeated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    /// `size` indices drawn uniformly with replacement from `pool`.
    pub fn draw<R: Rng + ?Sized>(pool: &[usize], size: usize, rng: &mut R) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let indices = (0..size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        Ok(Batch { indices })
    }

    /// The whole pool, in order.
    pub fn full(pool: &[usize]) -> Self {
        Batch {
            indices: pool.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let fan_in = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * fan_in..(k + 1) * fan_in];
        *o = b[k] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Cross-entropy of one sample; turns `logits` into `softmax - onehot`.
fn softmax_xent_in_place(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
    logits[label] -= 1.0;
    sum.ln() - shifted_label
}

/// Mean loss and (optionally) its gradient over `indices`.
fn loss_and_grad(
    spec: &ModelSpec,
    theta: &[f64],
    ds: &Dataset,
    indices: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    spec.check(theta, ds)?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = spec.num_classes;
    let d_in = spec.input_dim;
    let mut grad = want_grad.then(|| ParamVector::zeros(theta.len()));
    let mut total = 0.0;
    let mut logits = vec![0.0; c];

    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = theta.split_at(c * d_in);
            for &idx in indices {
                let x = ds.features(idx);
                dense_forward(w, b, x, &mut logits);
                total += softmax_xent_in_place(&mut logits, ds.label(idx));
                if let Some(g) = grad.as_mut() {
                    let (gw, gb) = g.split_at_mut(c * d_in);
                    for k in 0..c {
                        let dk = logits[k];
                        gb[k] += dk;
                        for (gwj, xj) in gw[k * d_in..(k + 1) * d_in].iter_mut().zip(x) {
                            *gwj += dk * xj;
                        }
                    }
                }
            }
        }
        ModelKind::Mlp { hidden_dim: h } => {
            let (w1, rest) = theta.split_at(h * d_in);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut hidden = vec![0.0; h];
            let mut dh = vec![0.0; h];
            for &idx in indices {
                let x = ds.features(idx);
                dense_forward(w1, b1, x, &mut hidden);
                hidden.iter_mut().for_each(|v| *v = v.tanh());
                dense_forward(w2, b2, &hidden, &mut logits);
                total += softmax_xent_in_place(&mut logits, ds.label(idx));
                if let Some(g) = grad.as_mut() {
                    let (gw1, rest) = g.split_at_mut(h * d_in);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let dk = logits[k];
                        gb2[k] += dk;
                        let row = k * h..(k + 1) * h;
                        for ((gw, w), (hj, dhj)) in gw2[row.clone()]
                            .iter_mut()
                            .zip(&w2[row])
                            .zip(hidden.iter().zip(dh.iter_mut()))
                        {
                            *gw += dk * hj;
                            *dhj += dk * w;
                        }
                    }
                    for j in 0..h {
                        let dz = dh[j] * (1.0 - hidden[j] * hidden[j]);
                        gb1[j] += dz;
                        for (gw, xi) in gw1[j * d_in..(j + 1) * d_in].iter_mut().zip(x) {
                            *gw += dz * xi;
                        }
                    }
                }
            }
        }
    }

    let n = indices.len() as f64;
    if let Some(g) = grad.as_mut() {
        g.scale(1.0 / n);
    }
    Ok((total / n, grad))
}

/// Mean cross-entropy over the samples in `indices`.
pub fn loss(spec: &ModelSpec, theta: &[f64], ds: &Dataset, indices: &[usize]) -> Result<f64> {
    loss_and_grad(spec, theta, ds, indices, false).map(|(l, _)| l)
}

/// Exact gradient of [`loss`] over `indices`.
pub fn grad(spec: &ModelSpec, theta: &[f64], ds: &Dataset, indices: &[usize]) -> Result<ParamVector> {
    loss_and_grad(spec, theta, ds, indices, true).map(|(_, g)| g.expect("gradient requested"))
}

/// Gradient over a mini-batch of `batch_size` samples drawn with replacement
/// from `pool` (the client's local dataset).
pub fn stochastic_grad<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta: &[f64],
    ds: &Dataset,
    pool: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    let batch = Batch::draw(pool, batch_size, rng)?;
    grad(spec, theta, ds, &batch.indices)
}

/// Class scores for one input; ties in the argmax resolve to the lowest id.
pub fn predict(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> usize {
    let c = spec.num_classes;
    let d_in = spec.input_dim;
    let mut logits = vec![0.0; c];
    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = theta.split_at(c * d_in);
            dense_forward(w, b, x, &mut logits);
        }
        ModelKind::Mlp { hidden_dim: h } => {
            let (w1, rest) = theta.split_at(h * d_in);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut hidden = vec![0.0; h];
            dense_forward(w1, b1, x, &mut hidden);
            hidden.iter_mut().for_each(|v| *v = v.tanh());
            dense_forward(w2, b2, &hidden, &mut logits);
        }
    }
    let mut best = 0;
    for k in 1..c {
        if logits[k] > logits[best] {
            best = k;
        }
    }
    best
}
