//! Fixed-architecture multilayer perceptron with hand-written reverse mode.
//!
//! The network is `input -> hidden1 -> hidden2 -> output` with ReLU and
//! inverted dropout after each hidden activation. Parameters live in one flat
//! buffer laid out as `[W1, b1, W2, b2, W3, b3]`, weights row-major with shape
//! `(out, in)`. Flat gradients use the same layout, so a gradient row can be
//! dotted against any other gradient row without reshaping.

use crate::error::{Error, Result};
use crate::linalg::{check_len, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
}

impl MlpShape {
    /// The tabular architecture: two hidden layers of 128 units, two logits.
    pub fn tabular(input: usize) -> Self {
        Self {
            input,
            hidden: [DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            output: 2,
        }
    }

    fn dims(&self) -> [usize; 4] {
        [self.input, self.hidden[0], self.hidden[1], self.output]
    }

    pub fn num_params(&self) -> usize {
        let d = self.dims();
        (0..3).map(|l| d[l + 1] * d[l] + d[l + 1]).sum()
    }

    /// `(weight_offset, bias_offset)` of layer `l` in the flat buffer.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let d = self.dims();
        let mut off = 0;
        for k in 0..l {
            off += d[k + 1] * d[k] + d[k + 1];
        }
        (off, off + d[l + 1] * d[l])
    }
}

/// How a forward pass treats dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Dropout active; the Bernoulli mask is drawn from `mask_seed`.
    Train { mask_seed: u64 },
    /// No dropout, no scaling.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    shape: MlpShape,
    params: Vec<f64>,
    momentum: Vec<f64>,
    dropout: f64,
}

/// Per-example gradients of the cross-entropy loss, one flattened row per
/// example, plus the per-example losses.
#[derive(Debug, Clone)]
pub struct PerExampleGrads {
    pub grads: Matrix,
    pub losses: Vec<f64>,
}

impl PerExampleGrads {
    pub fn batch_size(&self) -> usize {
        self.grads.rows()
    }

    /// `sum_i weights[i] * row_i`
    pub fn weighted_sum(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grads.cols()];
        for (row, &w) in self.grads.iter_rows().zip(weights) {
            if w != 0.0 {
                crate::linalg::axpy(w, row, &mut out);
            }
        }
        out
    }
}

/// Activations of one example kept for the backward pass.
struct Trace {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

/// Per-example inverted-dropout scale factors (0 or `1/(1-p)`) for both
/// hidden layers. `None` means every unit is kept unscaled.
type Masks = Option<(Vec<f64>, Vec<f64>)>;

impl MlpModel {
    /// PyTorch-style uniform init: every weight and bias of a layer is drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(shape: MlpShape, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.dims();
        let mut params = Vec::with_capacity(shape.num_params());
        for l in 0..3 {
            let bound = 1.0 / (d[l] as f64).sqrt();
            for _ in 0..(d[l + 1] * d[l] + d[l + 1]) {
                params.push(rng.gen_range(-bound..=bound));
            }
        }
        Self::from_params(shape, params, dropout)
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>, dropout: f64) -> Result<Self> {
        if shape.input == 0 || shape.hidden.contains(&0) || shape.output == 0 {
            return Err(Error::shape("every layer width must be positive"));
        }
        check_len("parameter vector", params.len(), shape.num_params())?;
        if !(0.0..=1.0).contains(&dropout) {
            return Err(Error::input(format!(
                "dropout probability {dropout} not in [0,1]"
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        let momentum = vec![0.0; params.len()];
        Ok(Self {
            shape,
            params,
            momentum,
            dropout,
        })
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Copy of this model with a different parameter vector and a fresh
    /// momentum buffer. Used for unrolled look-ahead parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.shape, params, self.dropout)
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.shape.input {
            return Err(Error::shape(format!(
                "batch has {} features, model expects {}",
                batch.cols(),
                self.shape.input
            )));
        }
        Ok(())
    }

    fn masks(&self, batch_size: usize, mode: ForwardMode) -> Vec<Masks> {
        let p = self.dropout;
        match mode {
            ForwardMode::Train { mask_seed } if p > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let keep_scale = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|_| {
                            if rng.gen::<f64>() < p {
                                0.0
                            } else {
                                keep_scale
                            }
                        })
                        .collect()
                };
                (0..batch_size)
                    .map(|_| {
                        let m1 = draw(self.shape.hidden[0]);
                        let m2 = draw(self.shape.hidden[1]);
                        Some((m1, m2))
                    })
                    .collect()
            }
            _ => vec![None; batch_size],
        }
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let d = self.shape.dims();
        let (w_off, b_off) = self.shape.offsets(layer);
        let (n_in, n_out) = (d[layer], d[layer + 1]);
        (0..n_out)
            .map(|o| {
                let w = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                self.params[b_off + o] + crate::linalg::dot(w, input)
            })
            .collect()
    }

    fn forward_one(&self, x: &[f64], masks: &Masks) -> Trace {
        let activate = |z: &[f64], mask: Option<&Vec<f64>>| -> Vec<f64> {
            z.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let r = v.max(0.0);
                    match mask {
                        Some(m) => r * m[j],
                        None => r,
                    }
                })
                .collect()
        };
        let z1 = self.affine(0, x);
        let h1 = activate(&z1, masks.as_ref().map(|m| &m.0));
        let z2 = self.affine(1, &h1);
        let h2 = activate(&z2, masks.as_ref().map(|m| &m.1));
        let logits = self.affine(2, &h2);
        Trace {
            z1,
            h1,
            z2,
            h2,
            logits,
        }
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `dlogits`.
    fn backward_one(
        &self,
        x: &[f64],
        trace: &Trace,
        masks: &Masks,
        dlogits: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.shape.dims();

        // layer 3
        let (w3, b3) = self.shape.offsets(2);
        let mut dh2 = vec![0.0; d[2]];
        for o in 0..d[3] {
            let g = dlogits[o];
            if g == 0.0 {
                continue;
            }
            grad[b3 + o] += g;
            let row = w3 + o * d[2];
            for j in 0..d[2] {
                grad[row + j] += g * trace.h2[j];
                dh2[j] += g * self.params[row + j];
            }
        }

        // layer 2
        let (w2, b2) = self.shape.offsets(1);
        let mut dh1 = vec![0.0; d[1]];
        for o in 0..d[2] {
            if trace.z2[o] <= 0.0 {
                continue;
            }
            let scale = masks.as_ref().map_or(1.0, |m| m.1[o]);
            let g = dh2[o] * scale;
            if g == 0.0 {
                continue;
            }
            grad[b2 + o] += g;
            let row = w2 + o * d[1];
            for j in 0..d[1] {
                grad[row + j] += g * trace.h1[j];
                dh1[j] += g * self.params[row + j];
            }
        }

        // layer 1
        let (w1, b1) = self.shape.offsets(0);
        for o in 0..d[1] {
            if trace.z1[o] <= 0.0 {
                continue;
            }
            let scale = masks.as_ref().map_or(1.0, |m| m.0[o]);
            let g = dh1[o] * scale;
            if g == 0.0 {
                continue;
            }
            grad[b1 + o] += g;
            let row = w1 + o * d[0];
            for j in 0..d[0] {
                grad[row + j] += g * x[j];
            }
        }
    }

    pub fn forward(&self, batch: &Matrix, mode: ForwardMode) -> Result<Matrix> {
        self.check_batch(batch)?;
        let masks = self.masks(batch.rows(), mode);
        let mut out = Matrix::zeros(batch.rows(), self.shape.output);
        for (i, x) in batch.iter_rows().enumerate() {
            let trace = self.forward_one(x, &masks[i]);
            out.row_mut(i).copy_from_slice(&trace.logits);
        }
        Ok(out)
    }

    /// Softmax probability of class 1 for every row, evaluated without dropout.
    pub fn positive_scores(&self, batch: &Matrix) -> Result<Vec<f64>> {
        let logits = self.forward(batch, ForwardMode::Eval)?;
        Ok(logits
            .iter_rows()
            .map(|z| {
                let probs = softmax(z);
                probs.get(1).copied().unwrap_or(0.0)
            })
            .collect())
    }

    /// One flattened gradient row per example.
    pub fn per_example_gradients(
        &self,
        batch: &Matrix,
        labels: &[usize],
        mode: ForwardMode,
    ) -> Result<PerExampleGrads> {
        self.check_batch(batch)?;
        check_len("labels", labels.len(), batch.rows())?;
        check_labels(labels, self.shape.output)?;
        let masks = self.masks(batch.rows(), mode);
        let p = self.num_params();
        let mut grads = Matrix::zeros(batch.rows(), p);
        let losses: Vec<f64> = grads
            .as_mut_slice()
            .par_chunks_mut(p.max(1))
            .enumerate()
            .map(|(i, row)| {
                let x = batch.row(i);
                let trace = self.forward_one(x, &masks[i]);
                let (loss, dlogits) = softmax_ce_with_grad(&trace.logits, labels[i]);
                self.backward_one(x, &trace, &masks[i], &dlogits, row);
                loss
            })
            .collect();
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite per-example gradient".into()));
        }
        Ok(PerExampleGrads { grads, losses })
    }

    /// Gradient of `sum_i weights[i] * loss_i`, accumulated directly in one
    /// backward sweep. Returns the weighted loss and the gradient.
    pub fn weighted_loss_gradient(
        &self,
        batch: &Matrix,
        labels: &[usize],
        weights: &[f64],
        mode: ForwardMode,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        check_len("labels", labels.len(), batch.rows())?;
        check_len("weights", weights.len(), batch.rows())?;
        check_labels(labels, self.shape.output)?;
        let masks = self.masks(batch.rows(), mode);
        let mut grad = vec![0.0; self.num_params()];
        let mut total = 0.0;
        for (i, x) in batch.iter_rows().enumerate() {
            let trace = self.forward_one(x, &masks[i]);
            let (loss, mut dlogits) = softmax_ce_with_grad(&trace.logits, labels[i]);
            total += weights[i] * loss;
            if weights[i] == 0.0 {
                continue;
            }
            dlogits.iter_mut().for_each(|v| *v *= weights[i]);
            self.backward_one(x, &trace, &masks[i], &dlogits, &mut grad);
        }
        Ok((total, grad))
    }

    /// Mean cross-entropy over the batch in eval mode.
    pub fn mean_loss(&self, batch: &Matrix, labels: &[usize]) -> Result<f64> {
        let logits = self.forward(batch, ForwardMode::Eval)?;
        let losses = cross_entropy_per_example(&logits, labels)?;
        if losses.is_empty() {
            return Err(Error::input("mean loss of an empty batch"));
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// `buffer <- momentum * buffer + (gradient + weight_decay * theta)`,
    /// then `theta <- theta - lr * buffer`.
    pub fn sgd_momentum_step(&mut self, gradient: &[f64], lr: f64, cfg: SgdConfig) -> Result<()> {
        check_len("gradient", gradient.len(), self.num_params())?;
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for ((theta, buf), &g) in self.params.iter_mut().zip(&mut self.momentum).zip(gradient) {
            *buf = cfg.momentum * *buf + (g + cfg.weight_decay * *theta);
            *theta -= lr * *buf;
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameters diverged".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::input(format!(
            "label {y} at row {i} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_ce_with_grad(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + sum.ln();
    let loss = lse - z[label];
    let mut grad: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Softmax cross-entropy per row via a shifted log-sum-exp.
pub fn cross_entropy_per_example(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_len("labels", labels.len(), logits.rows())?;
    check_labels(labels, logits.cols())?;
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(z, &y)| softmax_ce_with_grad(z, y).0)
        .collect())
}
