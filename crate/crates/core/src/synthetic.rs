//! Two-objective toy problem on `θ ∈ ℝ²` and a trajectory runner for every
//! aggregation method.
//!
//! ```text
//! ℓ_1 = c_1 f_1 + c_2 h_1        ℓ_2 = c_1 f_2 + c_2 h_2
//! f_1 = log(max(|0.5(−θ₁ − 7) − tanh(−θ₂)|, 5e−6)) + 6
//! f_2 = log(max(|0.5(−θ₁ + 3) − tanh(−θ₂) + 2|, 5e−6)) + 6
//! h_1 = ((−θ₁ + 7)² + 0.1(−θ₂ − 8)²)/10 − 20
//! h_2 = ((−θ₁ − 7)² + 0.1(−θ₂ − 8)²)/10 − 20
//! c_1 = max(tanh(0.5θ₂), 0)      c_2 = max(tanh(−0.5θ₂), 0)
//! ```
//!
//! Kinks (the `max` and `|·|`) take subgradient zero on the flat side.

use crate::aggregation::{
    cagrad_aggregate, generalized_mean_aggregate, pcgrad_aggregate, protocol_weights,
    GradientMatrix, NbsOptions, ProtocolKind,
};
use crate::error::{Error, Result};
use crate::metalearn::{choose_coefficients, BargainStatus, Stage};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

const CLAMP: f64 = 5e-6;

/// Endpoint counts as Pareto-stationary at or below this value.
pub const PARETO_TOL: f64 = 1e-2;
/// Endpoint counts as fair when `|ℓ₁ − ℓ₂|` is at or below this value.
pub const FAIRNESS_TOL: f64 = 0.1;

pub const STANDARD_INITS: [[f64; 2]; 6] = [
    [-8.5, 7.5],
    [0.0, 0.0],
    [9.0, 9.0],
    [-7.5, -0.5],
    [9.0, -1.0],
    [9.0, -20.0],
];

/// Added to both losses before taking the power mean, which needs positive
/// arguments. Both losses stay above −21 everywhere.
pub const GM_LOSS_SHIFT: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoint {
    pub theta: [f64; 2],
    pub losses: [f64; 2],
    pub grads: [[f64; 2]; 2],
}

impl SyntheticPoint {
    pub fn at(theta: [f64; 2]) -> Self {
        Self {
            theta,
            losses: eval_losses(theta),
            grads: eval_gradients(theta),
        }
    }

    pub fn pareto_stationarity(&self) -> f64 {
        pareto_stationarity(self.grads[0], self.grads[1])
    }

    pub fn fairness_gap(&self) -> f64 {
        fairness_gap(self.losses)
    }
}

/// `(value, d/dθ)` of `log(max(|u|, 5e-6)) + 6` given `u` and `du/dθ`.
fn clamped_log(u: f64, du: [f64; 2]) -> (f64, [f64; 2]) {
    if u.abs() >= CLAMP {
        (u.abs().ln() + 6.0, [du[0] / u, du[1] / u])
    } else {
        (CLAMP.ln() + 6.0, [0.0, 0.0])
    }
}

/// `(value, gradient)` of both objectives.
fn evaluate(theta: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let [t1, t2] = theta;
    let tn = (-t2).tanh();
    // d/dθ₂ of −tanh(−θ₂)
    let dtn = 1.0 - tn * tn;

    let (f1, df1) = clamped_log(0.5 * (-t1 - 7.0) - tn, [-0.5, dtn]);
    let (f2, df2) = clamped_log(0.5 * (-t1 + 3.0) - tn + 2.0, [-0.5, dtn]);

    let h1 = ((-t1 + 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0;
    let h2 = ((-t1 - 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0;
    let dh_t2 = 0.2 * (t2 + 8.0) / 10.0;
    let dh1 = [2.0 * (t1 - 7.0) / 10.0, dh_t2];
    let dh2 = [2.0 * (t1 + 7.0) / 10.0, dh_t2];

    let a = (0.5 * t2).tanh();
    let (c1, dc1) = if a > 0.0 {
        (a, [0.0, 0.5 * (1.0 - a * a)])
    } else {
        (0.0, [0.0, 0.0])
    };
    let b = (-0.5 * t2).tanh();
    let (c2, dc2) = if b > 0.0 {
        (b, [0.0, -0.5 * (1.0 - b * b)])
    } else {
        (0.0, [0.0, 0.0])
    };

    let loss = |f: f64, h: f64| c1 * f + c2 * h;
    let grad = |f: f64, df: [f64; 2], h: f64, dh: [f64; 2]| {
        [0, 1].map(|j| dc1[j] * f + c1 * df[j] + dc2[j] * h + c2 * dh[j])
    };
    (
        [loss(f1, h1), loss(f2, h2)],
        [grad(f1, df1, h1, dh1), grad(f2, df2, h2, dh2)],
    )
}

pub fn eval_losses(theta: [f64; 2]) -> [f64; 2] {
    evaluate(theta).0
}

pub fn eval_gradients(theta: [f64; 2]) -> [[f64; 2]; 2] {
    evaluate(theta).1
}

/// `min_{λ∈[0,1]} ‖λ g₁ + (1−λ) g₂‖` in closed form.
pub fn pareto_stationarity(g1: [f64; 2], g2: [f64; 2]) -> f64 {
    let diff = [g1[0] - g2[0], g1[1] - g2[1]];
    let den = diff[0] * diff[0] + diff[1] * diff[1];
    let lambda = if den == 0.0 {
        0.5
    } else {
        (-(g2[0] * diff[0] + g2[1] * diff[1]) / den).clamp(0.0, 1.0)
    };
    let v = [g2[0] + lambda * diff[0], g2[1] + lambda * diff[1]];
    v[0].hypot(v[1])
}

pub fn fairness_gap(losses: [f64; 2]) -> f64 {
    (losses[0] - losses[1]).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ltr,
    Forml,
    Gdro,
    NbsFull,
    NbsTwoStage,
    Pcgrad,
    Cagrad,
    Gm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ltr,
        Method::Forml,
        Method::Gdro,
        Method::NbsFull,
        Method::NbsTwoStage,
        Method::Pcgrad,
        Method::Cagrad,
        Method::Gm,
    ];

    fn protocol(self) -> Option<ProtocolKind> {
        match self {
            Method::Ltr => Some(ProtocolKind::Ltr),
            Method::Forml => Some(ProtocolKind::Forml),
            Method::Gdro => Some(ProtocolKind::MetaGdro),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ltr => "ltr",
            Method::Forml => "forml",
            Method::Gdro => "gdro",
            Method::NbsFull => "nbs-full",
            Method::NbsTwoStage => "nbs-two-stage",
            Method::Pcgrad => "pcgrad",
            Method::Cagrad => "cagrad",
            Method::Gm => "gm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::input(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stage-1 length for `nbs-two-stage`; ignored by other methods.
    pub bargain_steps: usize,
    /// Fallback and stage-2 protocol of the bargaining methods.
    pub protocol: ProtocolKind,
    pub cagrad_c: f64,
    pub gm_p: f64,
    pub nbs: NbsOptions,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.1,
            bargain_steps: 100,
            protocol: ProtocolKind::Ltr,
            cagrad_c: 0.5,
            gm_p: 2.0,
            nbs: NbsOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bargain: Option<BargainStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    pub direction: [f64; 2],
    /// `∇ℓ_iᵀd` for the applied direction `d`.
    pub utilities: [f64; 2],
}

impl TrajectoryStep {
    pub fn min_utility(&self) -> f64 {
        self.utilities[0].min(self.utilities[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: Method,
    pub init: [f64; 2],
    /// `steps + 1` points, the initial one first.
    pub points: Vec<SyntheticPoint>,
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointClass {
    pub pareto_stationarity: f64,
    pub fairness_gap: f64,
    pub pareto_ok: bool,
    pub fair_ok: bool,
}

impl EndpointClass {
    pub fn both(&self) -> bool {
        self.pareto_ok && self.fair_ok
    }
}

impl Trajectory {
    pub fn endpoint(&self) -> &SyntheticPoint {
        self.points
            .last()
            .expect("trajectory holds the initial point")
    }

    pub fn classify(&self) -> EndpointClass {
        let end = self.endpoint();
        let ps = end.pareto_stationarity();
        let gap = end.fairness_gap();
        EndpointClass {
            pareto_stationarity: ps,
            fairness_gap: gap,
            pareto_ok: ps <= PARETO_TOL,
            fair_ok: gap <= FAIRNESS_TOL,
        }
    }
}

fn protocol_direction(kind: ProtocolKind, p: &SyntheticPoint) -> Result<[f64; 2]> {
    let w = protocol_weights(kind, &p.losses)?.weights;
    Ok([0, 1].map(|j| w[0] * p.grads[0][j] + w[1] * p.grads[1][j]))
}

/// Plain gradient descent along the aggregated direction.
pub fn run_trajectory(
    method: Method,
    init: [f64; 2],
    cfg: &TrajectoryConfig,
) -> Result<Trajectory> {
    if !(init[0].is_finite() && init[1].is_finite()) {
        return Err(Error::input("initial point must be finite"));
    }
    let mut points = Vec::with_capacity(cfg.steps + 1);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut point = SyntheticPoint::at(init);
    points.push(point);
    for t in 0..cfg.steps {
        let mut record = TrajectoryStep {
            step: t,
            stage: None,
            bargain: None,
            alpha: None,
            direction: [0.0; 2],
            utilities: [0.0; 2],
        };
        let columns = || vec![point.grads[0].to_vec(), point.grads[1].to_vec()];
        let direction = match method {
            Method::Ltr | Method::Forml | Method::Gdro => {
                protocol_direction(method.protocol().expect("protocol method"), &point)?
            }
            Method::NbsFull | Method::NbsTwoStage => {
                let bargain_steps = if method == Method::NbsFull {
                    usize::MAX
                } else {
                    cfg.bargain_steps
                };
                let choice = choose_coefficients(
                    &columns(),
                    t,
                    bargain_steps,
                    cfg.protocol,
                    &point.losses,
                    cfg.nbs,
                )?;
                record.stage = Some(choice.stage);
                record.bargain = Some(choice.status);
                if choice.status == BargainStatus::Agreed {
                    record.alpha = Some(choice.protocol.weights.clone());
                }
                let w = &choice.protocol.weights;
                [0, 1].map(|j| w[0] * point.grads[0][j] + w[1] * point.grads[1][j])
            }
            Method::Pcgrad | Method::Cagrad | Method::Gm => match GradientMatrix::new(columns()) {
                // a vanishing gradient leaves nothing to reconcile
                Err(_) => [0, 1].map(|j| 0.5 * (point.grads[0][j] + point.grads[1][j])),
                Ok(g) => {
                    let d = match method {
                        Method::Pcgrad => pcgrad_aggregate(&g),
                        Method::Cagrad => cagrad_aggregate(&g, cfg.cagrad_c)?,
                        _ => {
                            let shifted = point.losses.map(|l| l + GM_LOSS_SHIFT);
                            generalized_mean_aggregate(&g, &shifted, cfg.gm_p)?
                        }
                    };
                    [d[0], d[1]]
                }
            },
        };
        record.direction = direction;
        record.utilities =
            [0, 1].map(|i| point.grads[i][0] * direction[0] + point.grads[i][1] * direction[1]);
        steps.push(record);
        let next = [
            point.theta[0] - cfg.lr * direction[0],
            point.theta[1] - cfg.lr * direction[1],
        ];
        point = SyntheticPoint::at(next);
        points.push(point);
    }
    Ok(Trajectory {
        method,
        init,
        points,
        steps,
    })
}
