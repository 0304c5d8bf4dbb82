//! Two-stage reweighting: bargain over group hypergradients early in
//! training, then fall back to the configured fairness protocol.
//!
//! Each step follows the same four parts:
//!
//! 1. A virtual inner SGD step `θ̂(ε) = θ − η ∇_θ(ε · L_train)` at `ε = 0`.
//! 2. Group hypergradients `g_k = ∂L_k^val(θ̂(ε))/∂ε`. At `ε = 0` the chain
//!    rule collapses to `g_k[i] = −η a_kᵀ b_i`, with `a_k` the gradient of
//!    group `k`'s mean validation loss and `b_i` the `i`-th training
//!    example's gradient, both at `θ`. No graph is materialised.
//! 3. The aggregation weights `φ`: the bargained `α` while `t < T_bar` and the
//!    game is feasible, otherwise the protocol `β₀`. Then `ε = Σ φ_k g_k`.
//! 4. Example weights `w = normalize(max(−ε, 0))` and a momentum-SGD step on
//!    `w · L_train`.

use crate::aggregation::{
    nbs_solve, protocol_weights, BargainOutcome, GradientMatrix, InfeasibleReason, NbsOptions,
    Protocol, ProtocolKind,
};
use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::metrics::{alignment_rate, group_auc_metrics, AlignmentStats, GroupMetrics};
use crate::nn::{ForwardMode, MlpModel, MlpShape, PerExampleGrads, SgdConfig, DEFAULT_HIDDEN};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Bargain,
    Fairness,
}

impl Stage {
    pub fn at(step: usize, bargain_steps: usize) -> Self {
        if step < bargain_steps {
            Stage::Bargain
        } else {
            Stage::Fairness
        }
    }
}

/// What happened to the bargaining attempt at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BargainStatus {
    Agreed,
    Infeasible(InfeasibleReason),
    /// A hypergradient was zero or non-finite, so no game could be posed.
    Degenerate,
    /// Stage 2: no bargaining attempted.
    Skipped,
}

/// The weights chosen for one step and how they were chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientChoice {
    pub stage: Stage,
    pub status: BargainStatus,
    pub protocol: Protocol,
}

/// The two-stage rule: bargain while `step < bargain_steps`, keep `α` when the
/// game is feasible, otherwise use the default protocol.
pub fn choose_coefficients(
    columns: &[Vec<f64>],
    step: usize,
    bargain_steps: usize,
    default: ProtocolKind,
    group_losses: &[f64],
    opts: NbsOptions,
) -> Result<CoefficientChoice> {
    let stage = Stage::at(step, bargain_steps);
    let fallback = protocol_weights(default, group_losses)?;
    if stage == Stage::Fairness {
        return Ok(CoefficientChoice {
            stage,
            status: BargainStatus::Skipped,
            protocol: fallback,
        });
    }
    let (status, protocol) = match GradientMatrix::new(columns.to_vec()) {
        Err(_) => (BargainStatus::Degenerate, fallback),
        Ok(g) => match nbs_solve(&g, opts) {
            BargainOutcome::Agreed(a) => (BargainStatus::Agreed, Protocol::bargained(a.alpha)),
            BargainOutcome::Infeasible { reason, .. } => {
                (BargainStatus::Infeasible(reason), fallback)
            }
        },
    };
    Ok(CoefficientChoice {
        stage,
        status,
        protocol,
    })
}

/// Per-example weights on the current minibatch. Zero at the start of every
/// step; its derivative, not its value, drives the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonVector(pub Vec<f64>);

impl EpsilonVector {
    pub fn zeros(batch_size: usize) -> Self {
        Self(vec![0.0; batch_size])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct ValidationGroup {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HypergradientSet {
    /// `groups[k][i] = −η a_kᵀ b_i`
    pub groups: Vec<Vec<f64>>,
    /// `a_k`: gradient of group `k`'s mean validation loss.
    pub val_grads: Vec<Vec<f64>>,
    /// `b_i`: per-example training gradients.
    pub train_grads: PerExampleGrads,
    /// Mean validation loss of every group at `θ`.
    pub group_losses: Vec<f64>,
}

impl HypergradientSet {
    /// `Σ_k coeffs[k] g_k`
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let n = self.train_grads.batch_size();
        let mut out = vec![0.0; n];
        for (c, g) in coeffs.iter().zip(&self.groups) {
            crate::linalg::axpy(*c, g, &mut out);
        }
        out
    }

    /// `min_k g_kᵀ v`
    pub fn min_utility(&self, v: &[f64]) -> f64 {
        self.groups
            .iter()
            .map(|g| dot(g, v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// The look-ahead parameters `θ − lr ∇_θ(ε · L_train)`, dropout off.
pub fn unroll_inner_step(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[usize],
    eps: &EpsilonVector,
    lr: f64,
) -> Result<Vec<f64>> {
    crate::linalg::check_len("epsilon", eps.0.len(), batch.rows())?;
    let (_, grad) = model.weighted_loss_gradient(batch, labels, &eps.0, ForwardMode::Eval)?;
    Ok(model
        .params()
        .iter()
        .zip(&grad)
        .map(|(t, g)| t - lr * g)
        .collect())
}

/// `g_k[i] = −lr · a_kᵀ b_i` for validation gradients `a_k` and the rows `b_i`
/// of `train_grads`.
pub fn hypergradient_columns(
    val_grads: &[Vec<f64>],
    train_grads: &Matrix,
    lr: f64,
) -> Vec<Vec<f64>> {
    val_grads
        .iter()
        .map(|a| train_grads.iter_rows().map(|b| -lr * dot(a, b)).collect())
        .collect()
}

/// Closed-form group hypergradients at `ε = 0`, evaluated without dropout.
pub fn group_hypergradients(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[usize],
    val_groups: &[ValidationGroup],
    lr: f64,
) -> Result<HypergradientSet> {
    if val_groups.is_empty() {
        return Err(Error::input("no validation groups"));
    }
    let train_grads = model.per_example_gradients(batch, labels, ForwardMode::Eval)?;
    let mut val_grads = Vec::with_capacity(val_groups.len());
    let mut group_losses = Vec::with_capacity(val_groups.len());
    for (k, vg) in val_groups.iter().enumerate() {
        let n = vg.labels.len();
        if n == 0 {
            return Err(Error::input(format!("validation group {k} is empty")));
        }
        let w = vec![1.0 / n as f64; n];
        let (loss, grad) =
            model.weighted_loss_gradient(&vg.features, &vg.labels, &w, ForwardMode::Eval)?;
        val_grads.push(grad);
        group_losses.push(loss);
    }
    let groups = hypergradient_columns(&val_grads, &train_grads.grads, lr);
    Ok(HypergradientSet {
        groups,
        val_grads,
        train_grads,
        group_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub fraction_nonzero: f64,
    pub max: f64,
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub bargain: BargainStatus,
    pub alpha: Option<Vec<f64>>,
    /// `min_k g_kᵀε` for the applied `ε`.
    pub min_utility: f64,
    pub protocol: ProtocolKind,
    pub phi: Vec<f64>,
    pub group_val_losses: Vec<f64>,
    pub weights: WeightStats,
    pub lr: f64,
    pub meta_lr: f64,
}

/// Picks `φ` by the two-stage rule and returns `ε = Σ φ_k g_k` with a record
/// whose weight statistics are left empty for the caller to fill in.
pub fn epsilon_update(
    hg: &HypergradientSet,
    step: usize,
    bargain_steps: usize,
    protocol: ProtocolKind,
    opts: NbsOptions,
) -> Result<(EpsilonVector, StepRecord)> {
    let choice = choose_coefficients(
        &hg.groups,
        step,
        bargain_steps,
        protocol,
        &hg.group_losses,
        opts,
    )?;
    let eps = hg.combine(&choice.protocol.weights);
    let record = StepRecord {
        step,
        epoch: 0,
        stage: choice.stage,
        bargain: choice.status,
        alpha: (choice.status == BargainStatus::Agreed).then(|| choice.protocol.weights.clone()),
        min_utility: hg.min_utility(&eps),
        protocol: choice.protocol.kind,
        phi: choice.protocol.weights,
        group_val_losses: hg.group_losses.clone(),
        weights: WeightStats {
            fraction_nonzero: 0.0,
            max: 0.0,
        },
        lr: 0.0,
        meta_lr: 0.0,
    };
    Ok((EpsilonVector(eps), record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightNorm {
    L2,
    L1,
}

/// `normalize(max(−ε, 0))`; an all-zero vector stays zero.
pub fn example_weights(eps: &EpsilonVector, norm: WeightNorm) -> Vec<f64> {
    let clipped: Vec<f64> = eps.0.iter().map(|e| (-e).max(0.0)).collect();
    let total = match norm {
        WeightNorm::L2 => crate::linalg::norm(&clipped),
        WeightNorm::L1 => clipped.iter().sum(),
    };
    if total > 0.0 {
        clipped.into_iter().map(|w| w / total).collect()
    } else {
        clipped
    }
}

/// Reweighted momentum-SGD step. Dropout uses `mask_seed`. Returns the
/// example weights that were applied.
#[allow(clippy::too_many_arguments)]
pub fn weighted_param_update(
    model: &mut MlpModel,
    batch: &Matrix,
    labels: &[usize],
    eps: &EpsilonVector,
    lr: f64,
    sgd: SgdConfig,
    norm: WeightNorm,
    mask_seed: u64,
) -> Result<Vec<f64>> {
    crate::linalg::check_len("epsilon", eps.0.len(), batch.rows())?;
    let w = example_weights(eps, norm);
    let grad = if w.iter().all(|&v| v == 0.0) {
        vec![0.0; model.num_params()]
    } else {
        model
            .weighted_loss_gradient(batch, labels, &w, ForwardMode::Train { mask_seed })?
            .1
    };
    model.sgd_momentum_step(&grad, lr, sgd)?;
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub bargain_epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub protocol: ProtocolKind,
    pub seed: u64,
    pub hidden: [usize; 2],
    pub sgd: SgdConfig,
    pub weight_norm: WeightNorm,
    pub nbs: NbsOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            bargain_epochs: 15,
            lr: 1e-3,
            dropout: 0.4,
            batch_size: 32,
            protocol: ProtocolKind::Ltr,
            seed: 0,
            hidden: [DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            sgd: SgdConfig::default(),
            weight_norm: WeightNorm::L2,
            nbs: NbsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub test: GroupMetrics,
    pub val_group_losses: Vec<f64>,
    pub alignment: AlignmentStats,
    pub agreed_steps: usize,
    pub bargain_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MlpModel,
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: GroupMetrics,
}

fn validation_groups(ds: &GroupedDataset) -> Result<Vec<ValidationGroup>> {
    (0..ds.num_groups())
        .map(|k| {
            let idx: Vec<usize> = ds
                .val
                .iter()
                .copied()
                .filter(|&i| ds.groups[i] == k)
                .collect();
            if idx.is_empty() {
                return Err(Error::input(format!(
                    "validation split has no rows for group {:?}",
                    ds.group_names[k]
                )));
            }
            Ok(ValidationGroup {
                features: ds.features.select_rows(&idx),
                labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            })
        })
        .collect()
}

/// Test-split metrics with the favorable-class softmax probability as score.
pub fn evaluate(model: &MlpModel, ds: &GroupedDataset) -> Result<GroupMetrics> {
    let x = ds.features.select_rows(&ds.test);
    let scores = model.positive_scores(&x)?;
    let labels: Vec<bool> = ds.test.iter().map(|&i| ds.labels[i] == 1).collect();
    let groups: Vec<usize> = ds.test.iter().map(|&i| ds.groups[i]).collect();
    group_auc_metrics(&scores, &labels, &groups, ds.num_groups())
}

/// Runs the two-stage reweighting loop for `epochs` passes over the training
/// split. Bargaining covers the first `bargain_epochs` epochs. Deterministic
/// given the config.
pub fn train_two_stage(config: &TrainConfig, ds: &GroupedDataset) -> Result<TrainOutput> {
    if config.bargain_epochs > config.epochs {
        return Err(Error::input("bargain epochs exceed total epochs"));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    if ds.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let val_groups = validation_groups(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = MlpShape {
        input: ds.features.cols(),
        hidden: config.hidden,
        output: 2,
    };
    let mut model = MlpModel::new(shape, config.dropout, rng.gen())?;
    let steps_per_epoch = ds.train.len().div_ceil(config.batch_size);
    let bargain_steps = config.bargain_epochs * steps_per_epoch;

    let mut order = ds.train.clone();
    let mut records = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let epoch_start = records.len();
        for chunk in order.chunks(config.batch_size) {
            let x = ds.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let mask_seed: u64 = rng.gen();

            let hg = group_hypergradients(&model, &x, &y, &val_groups, config.lr)?;
            let (eps, mut record) =
                epsilon_update(&hg, step, bargain_steps, config.protocol, config.nbs)?;
            let w = weighted_param_update(
                &mut model,
                &x,
                &y,
                &eps,
                config.lr,
                config.sgd,
                config.weight_norm,
                mask_seed,
            )?;
            record.epoch = epoch;
            record.lr = config.lr;
            record.meta_lr = config.lr;
            record.weights = WeightStats {
                fraction_nonzero: w.iter().filter(|&&v| v > 0.0).count() as f64 / w.len() as f64,
                max: w.iter().cloned().fold(0.0, f64::max),
            };
            records.push(record);
            step += 1;
        }

        let epoch_records = &records[epoch_start..];
        let utilities: Vec<f64> = epoch_records.iter().map(|r| r.min_utility).collect();
        let alignment = alignment_rate(&utilities, &[0, utilities.len()])
            .pop()
            .expect("one window");
        let val_group_losses = val_groups
            .iter()
            .map(|g| model.mean_loss(&g.features, &g.labels))
            .collect::<Result<Vec<_>>>()?;
        epochs.push(EpochMetrics {
            epoch,
            test: evaluate(&model, ds)?,
            val_group_losses,
            alignment: AlignmentStats { epoch, ..alignment },
            agreed_steps: epoch_records
                .iter()
                .filter(|r| r.bargain == BargainStatus::Agreed)
                .count(),
            bargain_steps: epoch_records
                .iter()
                .filter(|r| r.stage == Stage::Bargain)
                .count(),
        });
    }
    let final_metrics = evaluate(&model, ds)?;
    Ok(TrainOutput {
        model,
        records,
        epochs,
        final_metrics,
    })
}
