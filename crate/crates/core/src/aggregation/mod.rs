//! Aggregating several group gradients into one update direction.
//!
//! The centre piece is [`nbs_solve`], the Nash bargaining solution over the
//! group hypergradients with disagreement point zero. The bargained update
//! `Δ = Σ α_i g_i` satisfies `GᵀG α = 1/α` element-wise, which gives every
//! player a strictly positive utility `g_iᵀΔ = 1/α_i`. The module also carries
//! the fixed fairness protocols (LtR, FORML, Meta-gDRO) and three conflict
//! aware baselines used on the synthetic benchmark.

mod baselines;
mod nbs;
mod protocol;

pub use baselines::{cagrad_aggregate, generalized_mean_aggregate, pcgrad_aggregate};
pub use nbs::{
    decomposition_report, nbs_solve, Agreement, BargainOutcome, DecompositionReport,
    DecompositionRow, InfeasibleReason, NbsOptions,
};
pub use protocol::{protocol_weights, Protocol, ProtocolKind};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

/// `g_iᵀΔ`: how much of the proposed update player `i` receives.
pub fn utility(g: &[f64], delta: &[f64]) -> Result<f64> {
    crate::linalg::check_len("update", delta.len(), g.len())?;
    Ok(dot(g, delta))
}

/// The `K` group gradients as columns of `G`, with `GᵀG` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    columns: Vec<Vec<f64>>,
    gram: Vec<f64>,
}

impl GradientMatrix {
    /// Rejects empty input, ragged or non-finite columns and zero columns.
    pub fn new(columns: Vec<Vec<f64>>) -> Result<Self> {
        let k = columns.len();
        if k == 0 {
            return Err(Error::input("gradient matrix needs at least one column"));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::input("gradient columns must be non-empty"));
        }
        for (i, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(Error::shape(format!(
                    "column {i} has length {}, expected {n}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("column {i} has a non-finite entry")));
            }
            if c.iter().all(|&v| v == 0.0) {
                return Err(Error::input(format!("column {i} is the zero vector")));
            }
        }
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = dot(&columns[i], &columns[j]);
                gram[i * k + j] = v;
                gram[j * k + i] = v;
            }
        }
        Ok(Self { columns, gram })
    }

    /// Number of players `K`.
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// Dimension `n` of the space the gradients live in.
    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    #[inline]
    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.k() + j]
    }

    /// `Σ coeffs[i] * g_i`
    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.k());
        let mut out = vec![0.0; self.dim()];
        for (c, g) in coeffs.iter().zip(&self.columns) {
            axpy(*c, g, &mut out);
        }
        out
    }

    /// `GᵀG v`
    pub(crate) fn gram_mul(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|i| dot(&self.gram[i * k..(i + 1) * k], v))
            .collect()
    }
}
