use super::GradientMatrix;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbsOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NbsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfeasibleReason {
    /// Newton stalled or left the finite range: no positive root reachable.
    NoPositiveRoot,
    /// Iteration budget exhausted above tolerance.
    ResidualNotConverged,
    /// A root was found but some player's utility is not positive.
    AlignmentViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    /// `g_iᵀΔ` for every player.
    pub utilities: Vec<f64>,
    /// `‖GᵀGα − 1/α‖∞`
    pub residual: f64,
    pub iterations: usize,
}

impl Agreement {
    pub fn min_utility(&self) -> f64 {
        self.utilities.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum BargainOutcome {
    Agreed(Agreement),
    Infeasible {
        reason: InfeasibleReason,
        iterations: usize,
    },
}

impl BargainOutcome {
    pub fn agreement(&self) -> Option<&Agreement> {
        match self {
            BargainOutcome::Agreed(a) => Some(a),
            BargainOutcome::Infeasible { .. } => None,
        }
    }

    pub fn is_agreed(&self) -> bool {
        matches!(self, BargainOutcome::Agreed(_))
    }
}

/// Solves `GᵀG α = 1/α` for `α > 0`.
///
/// Newton runs on `F(β) = GᵀG·exp(β) − exp(−β)` with `α = exp(β)`, so every
/// iterate stays positive. It starts from `α_i = 1/(√K‖g_i‖)` and backtracks
/// steps on `‖F‖²`.
///
/// Convergence requires both the absolute residual `‖F‖∞` and the scaled
/// residual `max_i |α_i (GᵀGα)_i − 1|` to be within `tol`; the scaled one is
/// what bounds the error in `‖Δ‖ = √K` when α is large.
pub fn nbs_solve(g: &GradientMatrix, opts: NbsOptions) -> BargainOutcome {
    let k = g.k();
    let gram = DMatrix::from_fn(k, k, |i, j| g.gram(i, j));
    let mut beta: Vec<f64> = (0..k)
        .map(|i| -((k as f64).sqrt() * g.gram(i, i).sqrt()).ln())
        .collect();

    let eval = |beta: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let alpha: Vec<f64> = beta.iter().map(|b| b.exp()).collect();
        let u = g.gram_mul(&alpha);
        let f = alpha.iter().zip(&u).map(|(a, ui)| ui - 1.0 / a).collect();
        (alpha, u, f)
    };
    let merit = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>();
    let converged = |alpha: &[f64], u: &[f64], f: &[f64]| {
        let abs = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let rel = alpha
            .iter()
            .zip(u)
            .fold(0.0_f64, |m, (a, ui)| m.max((a * ui - 1.0).abs()));
        abs <= opts.tol && rel <= opts.tol
    };

    let (mut alpha, mut u, mut f) = eval(&beta);
    let mut iterations = 0;
    loop {
        if f.iter().chain(&alpha).any(|v| !v.is_finite()) {
            return BargainOutcome::Infeasible {
                reason: InfeasibleReason::NoPositiveRoot,
                iterations,
            };
        }
        if converged(&alpha, &u, &f) {
            break;
        }
        if iterations >= opts.max_iter {
            return BargainOutcome::Infeasible {
                reason: InfeasibleReason::ResidualNotConverged,
                iterations,
            };
        }
        iterations += 1;

        // dF_i/dβ_j = (GᵀG)_ij α_j + δ_ij / α_i
        let mut jac = gram.clone();
        for j in 0..k {
            for i in 0..k {
                jac[(i, j)] *= alpha[j];
            }
            jac[(j, j)] += 1.0 / alpha[j];
        }
        let rhs = DVector::from_iterator(k, f.iter().map(|v| -v));
        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                return BargainOutcome::Infeasible {
                    reason: InfeasibleReason::NoPositiveRoot,
                    iterations,
                }
            }
        };

        let m0 = merit(&f);
        let max_step = step.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut lambda = if max_step > 10.0 {
            10.0 / max_step
        } else {
            1.0
        };
        let accepted = loop {
            let trial: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + lambda * s)
                .collect();
            let (a, uu, ff) = eval(&trial);
            let m = merit(&ff);
            if m.is_finite() && m <= (1.0 - 2e-4 * lambda) * m0 {
                break Some((trial, a, uu, ff));
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                break None;
            }
        };
        match accepted {
            Some((b, a, uu, ff)) => {
                beta = b;
                alpha = a;
                u = uu;
                f = ff;
            }
            None => {
                return BargainOutcome::Infeasible {
                    reason: InfeasibleReason::NoPositiveRoot,
                    iterations,
                }
            }
        }
    }

    let delta = g.combine(&alpha);
    let utilities: Vec<f64> = g
        .columns()
        .iter()
        .map(|c| crate::linalg::dot(c, &delta))
        .collect();
    if utilities.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return BargainOutcome::Infeasible {
            reason: InfeasibleReason::AlignmentViolated,
            iterations,
        };
    }
    let residual = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    BargainOutcome::Agreed(Agreement {
        alpha,
        delta,
        utilities,
        residual,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    /// `‖α_i g_i‖²`
    pub self_term: f64,
    /// `Σ_{j≠i} (α_i g_i)ᵀ(α_j g_j)`
    pub interaction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
}

/// Splits each player's unit share `α_i g_iᵀΔ = 1` into its own-gradient part
/// and the part contributed by the other players.
pub fn decomposition_report(
    outcome: &BargainOutcome,
    g: &GradientMatrix,
) -> Result<DecompositionReport> {
    let agreement = outcome
        .agreement()
        .ok_or_else(|| Error::State("decomposition needs an agreed bargain".into()))?;
    let alpha = &agreement.alpha;
    crate::linalg::check_len("alpha", alpha.len(), g.k())?;
    let rows = (0..g.k())
        .map(|i| {
            let self_term = alpha[i] * alpha[i] * g.gram(i, i);
            let interaction: f64 = (0..g.k())
                .filter(|&j| j != i)
                .map(|j| alpha[i] * alpha[j] * g.gram(i, j))
                .sum();
            DecompositionRow {
                self_term,
                interaction,
                total: self_term + interaction,
            }
        })
        .collect();
    Ok(DecompositionReport { rows })
}
