#![allow(dead_code)]

use nashmeta::linalg::{dot, norm, Matrix};
use nashmeta::metalearn::ValidationGroup;
use nashmeta::nn::{MlpModel, MlpShape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Standard normal draw by Box–Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform on the unit sphere.
pub fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        let r = norm(&v);
        if r > 1e-12 {
            return v.iter().map(|x| x / r).collect();
        }
    }
}

/// `k` columns scattered around a common direction with log-uniform scales.
/// Usually, not always, admits a direction improving every column.
pub fn clustered_columns(rng: &mut ChaCha8Rng, k: usize, n: usize, spread: f64) -> Vec<Vec<f64>> {
    let u = unit_vec(rng, n);
    (0..k)
        .map(|_| {
            let s = 10f64.powf(rng.gen_range(-1.0..1.0));
            let z = uniform_vec(rng, n);
            u.iter()
                .zip(&z)
                .map(|(a, b)| s * (a + spread * b))
                .collect()
        })
        .collect()
}

/// Replaces the last column with a copy or a positive multiple of another,
/// making the Gram matrix singular.
pub fn make_rank_deficient(rng: &mut ChaCha8Rng, cols: &mut [Vec<f64>]) {
    let k = cols.len();
    let src = rng.gen_range(0..k - 1);
    let c = if rng.gen_bool(0.5) {
        1.0
    } else {
        rng.gen_range(0.2..5.0)
    };
    cols[k - 1] = cols[src].iter().map(|v| c * v).collect();
}

/// `Σ log(xᵀg_i)`, or `-∞` outside the feasible cone.
pub fn log_utility(x: &[f64], cols: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for g in cols {
        let u = dot(x, g);
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        s += u.ln();
    }
    s
}

/// Maximises `Σ log(xᵀg_i)` over the unit sphere by projected gradient ascent
/// from `restarts` random feasible starts. `None` if no start was feasible.
pub fn sphere_oracle(cols: &[Vec<f64>], restarts: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    let n = cols[0].len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut started = 0;
    let mut tries = 0;
    while started < restarts && tries < 200_000 {
        tries += 1;
        let mut x = unit_vec(rng, n);
        let mut f = log_utility(&x, cols);
        if !f.is_finite() {
            continue;
        }
        started += 1;
        let mut eta = 0.1;
        for _ in 0..5000 {
            let grad: Vec<f64> = (0..n)
                .map(|j| cols.iter().map(|g| g[j] / dot(&x, g)).sum())
                .collect();
            let radial = dot(&grad, &x);
            let tangent: Vec<f64> = grad.iter().zip(&x).map(|(g, xi)| g - radial * xi).collect();
            if norm(&tangent) < 1e-12 * norm(&grad) {
                break;
            }
            let step = |eta: f64| {
                let y: Vec<f64> = x.iter().zip(&tangent).map(|(a, t)| a + eta * t).collect();
                let r = norm(&y);
                y.into_iter().map(|v| v / r).collect::<Vec<f64>>()
            };
            let y = step(eta);
            let fy = log_utility(&y, cols);
            if fy > f {
                x = y;
                f = fy;
                eta *= 1.5;
            } else {
                eta *= 0.5;
                if eta < 1e-16 {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x)
}

/// A tiny net with `input` features, hidden widths `[h, h]`, two logits.
pub fn tiny_model(input: usize, h: usize, seed: u64) -> MlpModel {
    let shape = MlpShape {
        input,
        hidden: [h, h],
        output: 2,
    };
    MlpModel::new(shape, 0.0, seed).unwrap()
}

/// Random features with labels from a noisy linear rule.
pub fn toy_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Matrix, Vec<usize>) {
    let w = uniform_vec(rng, cols);
    let mut data = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let x = uniform_vec(rng, cols);
        labels.push(usize::from(dot(&w, &x) + rng.gen_range(-0.3..0.3) > 0.0));
        data.extend(x);
    }
    (Matrix::from_vec(rows, cols, data).unwrap(), labels)
}

pub fn toy_val_groups(
    rng: &mut ChaCha8Rng,
    k: usize,
    rows: usize,
    cols: usize,
) -> Vec<ValidationGroup> {
    (0..k)
        .map(|_| {
            let (features, labels) = toy_batch(rng, rows, cols);
            ValidationGroup { features, labels }
        })
        .collect()
}

pub fn titanic_spec_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/titanic.json")
}
