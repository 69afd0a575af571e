//! Small differentiable classifiers with hand-written gradients.
//!
//! Parameters live in one flat `Vec<f64>`. Weight matrices are row-major with
//! one row per output unit and are followed by their bias vector:
//!
//! - softmax regression: `W (classes x features)`, `b (classes)`
//! - two-layer MLP: `W1 (hidden x features)`, `b1`, `W2 (classes x hidden)`, `b2`

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    SoftmaxRegression {
        n_features: usize,
        n_classes: usize,
    },
    /// Rectifier hidden layer.
    Mlp2 {
        n_features: usize,
        hidden_width: usize,
        n_classes: usize,
    },
}

impl ModelSpec {
    pub fn n_features(&self) -> usize {
        match *self {
            ModelSpec::SoftmaxRegression { n_features, .. } | ModelSpec::Mlp2 { n_features, .. } => {
                n_features
            }
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            ModelSpec::SoftmaxRegression { n_classes, .. } | ModelSpec::Mlp2 { n_classes, .. } => {
                n_classes
            }
        }
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        match *self {
            ModelSpec::SoftmaxRegression {
                n_features,
                n_classes,
            } => vec![n_features, n_classes],
            ModelSpec::Mlp2 {
                n_features,
                hidden_width,
                n_classes,
            } => vec![n_features, hidden_width, n_classes],
        }
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) {
            return Err(Error::config("model", format!("all dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.n_params()],
            shape: spec.layer_dims(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.n_params() {
            return Err(Error::Dimension {
                expected: spec.n_params(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ModelParams {
    let dims = spec.layer_dims();
    let mut values = Vec::with_capacity(spec.n_params());
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ModelParams {
        values,
        shape: dims,
    }
}

/// Row-major feature matrix paired with labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
    pub n_features: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize], n_features: usize) -> Self {
        Self {
            features,
            labels,
            n_features,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if self.n_features != spec.n_features() {
            return Err(Error::Dimension {
                expected: spec.n_features(),
                actual: self.n_features,
            });
        }
        if self.features.len() != self.labels.len() * self.n_features {
            return Err(Error::Data(format!(
                "{} feature values for {} samples of width {}",
                self.features.len(),
                self.labels.len(),
                self.n_features
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= spec.n_classes()) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{}",
                spec.n_classes()
            )));
        }
        Ok(())
    }
}

/// `out = W x + b` for a row-major `W` of shape `(rows, x.len())`.
fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weights[r * cols..(r + 1) * cols];
        *o = bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Stable `log sum exp`, returning it along with the softmax in `probs`.
fn log_softmax(logits: &[f64], probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// Per-sample forward pass. Fills `logits`; for the MLP also the hidden
/// activations (post-rectifier).
fn forward(spec: &ModelSpec, params: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    match *spec {
        ModelSpec::SoftmaxRegression {
            n_features,
            n_classes,
        } => {
            let (w, b) = params.split_at(n_features * n_classes);
            affine(w, b, x, logits);
        }
        ModelSpec::Mlp2 {
            n_features,
            hidden_width,
            n_classes,
        } => {
            let (w1, rest) = params.split_at(n_features * hidden_width);
            let (b1, rest) = rest.split_at(hidden_width);
            let (w2, b2) = rest.split_at(hidden_width * n_classes);
            affine(w1, b1, x, hidden);
            for h in hidden.iter_mut() {
                *h = h.max(0.0);
            }
            affine(w2, b2, hidden, logits);
        }
    }
}

fn hidden_width(spec: &ModelSpec) -> usize {
    match *spec {
        ModelSpec::SoftmaxRegression { .. } => 0,
        ModelSpec::Mlp2 { hidden_width, .. } => hidden_width,
    }
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_gradient(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<(f64, Vec<f64>)> {
    params.check(spec)?;
    batch.check(spec)?;
    let k = spec.n_classes();
    let n = batch.len() as f64;
    let w = &params.values;
    let mut grad = vec![0.0; w.len()];
    let mut hidden = vec![0.0; hidden_width(spec)];
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let mut loss = 0.0;

    for i in 0..batch.len() {
        let x = batch.row(i);
        let y = batch.labels[i];
        forward(spec, w, x, &mut hidden, &mut logits);
        let lse = log_softmax(&logits, &mut probs);
        loss += lse - logits[y];
        // dL/dlogits = softmax - onehot
        let mut delta = probs.clone();
        delta[y] -= 1.0;

        match *spec {
            ModelSpec::SoftmaxRegression { n_features, .. } => {
                let (gw, gb) = grad.split_at_mut(n_features * k);
                for (c, &d) in delta.iter().enumerate() {
                    for (g, &xv) in gw[c * n_features..(c + 1) * n_features].iter_mut().zip(x) {
                        *g += d * xv;
                    }
                    gb[c] += d;
                }
            }
            ModelSpec::Mlp2 {
                n_features,
                hidden_width: h,
                ..
            } => {
                let w2 = &w[n_features * h + h..n_features * h + h + h * k];
                let (gw1, rest) = grad.split_at_mut(n_features * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h * k);
                let mut back = vec![0.0; h];
                for (c, &d) in delta.iter().enumerate() {
                    for j in 0..h {
                        gw2[c * h + j] += d * hidden[j];
                        back[j] += d * w2[c * h + j];
                    }
                    gb2[c] += d;
                }
                for j in 0..h {
                    // subgradient 0 at the kink
                    if hidden[j] <= 0.0 {
                        continue;
                    }
                    let d = back[j];
                    for (g, &xv) in gw1[j * n_features..(j + 1) * n_features].iter_mut().zip(x) {
                        *g += d * xv;
                    }
                    gb1[j] += d;
                }
            }
        }
    }

    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// Per-sample cross-entropy losses and argmax predictions.
pub fn per_sample(
    params: &ModelParams,
    spec: &ModelSpec,
    batch: &Batch<'_>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    params.check(spec)?;
    batch.check(spec)?;
    let k = spec.n_classes();
    let mut hidden = vec![0.0; hidden_width(spec)];
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let mut losses = Vec::with_capacity(batch.len());
    let mut predictions = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        forward(spec, &params.values, batch.row(i), &mut hidden, &mut logits);
        let lse = log_softmax(&logits, &mut probs);
        losses.push(lse - logits[batch.labels[i]]);
        // first maximum wins ties
        let mut best = 0;
        for c in 1..k {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        predictions.push(best);
    }
    Ok((losses, predictions))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

pub fn evaluate(params: &ModelParams, spec: &ModelSpec, batch: &Batch<'_>) -> Result<Evaluation> {
    let (losses, predictions) = per_sample(params, spec, batch)?;
    let correct = predictions
        .iter()
        .zip(batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let n = batch.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: losses.iter().sum::<f64>() / n,
    })
}
