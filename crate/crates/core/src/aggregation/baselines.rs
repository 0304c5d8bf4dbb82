//! Conflict-aware comparators for the two-objective benchmark.

use super::GradientMatrix;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// PCGrad: each gradient is projected off every other gradient it conflicts
/// with (negative inner product), visiting `j = 1..K` in order, then summed.
pub fn pcgrad_aggregate(g: &GradientMatrix) -> Vec<f64> {
    let k = g.k();
    let mut out = vec![0.0; g.dim()];
    for i in 0..k {
        let mut gi = g.column(i).to_vec();
        for j in (0..k).filter(|&j| j != i) {
            let gj = g.column(j);
            let d = dot(&gi, gj);
            if d < 0.0 {
                axpy(-d / g.gram(j, j), gj, &mut gi);
            }
        }
        axpy(1.0, &gi, &mut out);
    }
    out
}

/// CAGrad for two objectives.
///
/// With `g0` the mean gradient, picks the simplex weight `w` minimising
/// `g_wᵀg0 + c‖g0‖‖g_w‖` by golden-section search and returns
/// `(g0 + c‖g0‖/‖g_w‖ · g_w) / (1 + c²)`.
pub fn cagrad_aggregate(g: &GradientMatrix, c: f64) -> Result<Vec<f64>> {
    if g.k() != 2 {
        return Err(Error::Unsupported(format!(
            "CAGrad is implemented for two objectives, got {}",
            g.k()
        )));
    }
    let (g1, g2) = (g.column(0), g.column(1));
    let g0: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| 0.5 * (a + b)).collect();
    let radius = c * norm(&g0);
    let mix = |w: f64| -> Vec<f64> {
        g1.iter()
            .zip(g2)
            .map(|(a, b)| w * a + (1.0 - w) * b)
            .collect()
    };
    let objective = |w: f64| {
        let gw = mix(w);
        dot(&gw, &g0) + radius * norm(&gw)
    };
    let w = golden_section_min(objective, 0.0, 1.0, 1e-10);
    let gw = mix(w);
    let gw_norm = norm(&gw);
    let mut d = g0.clone();
    if gw_norm > 0.0 {
        axpy(radius / gw_norm, &gw, &mut d);
    }
    Ok(d.into_iter().map(|v| v / (1.0 + c * c)).collect())
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

/// Gradient of the power mean `((1/K) Σ L_i^p)^(1/p)` of the group losses.
pub fn generalized_mean_aggregate(
    g: &GradientMatrix,
    group_losses: &[f64],
    p: f64,
) -> Result<Vec<f64>> {
    crate::linalg::check_len("group losses", group_losses.len(), g.k())?;
    if let Some(l) = group_losses.iter().find(|&&l| l.is_nan() || l <= 0.0) {
        return Err(Error::input(format!(
            "generalized mean needs positive losses, got {l}"
        )));
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::input(format!("generalized mean exponent {p} < 1")));
    }
    let k = g.k() as f64;
    let mean_pow = group_losses.iter().map(|l| l.powf(p)).sum::<f64>() / k;
    let gm = mean_pow.powf(1.0 / p);
    let weights: Vec<f64> = group_losses
        .iter()
        .map(|l| l.powf(p - 1.0) * gm.powf(1.0 - p) / k)
        .collect();
    Ok(g.combine(&weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;

    fn gm(cols: Vec<Vec<f64>>) -> GradientMatrix {
        GradientMatrix::new(cols).unwrap()
    }

    #[test]
    fn pcgrad_examples() {
        assert_eq!(
            pcgrad_aggregate(&gm(vec![vec![1.0, 0.0], vec![0.0, 1.0]])),
            vec![1.0, 1.0]
        );
        let out = pcgrad_aggregate(&gm(vec![vec![1.0, 0.0], vec![-1.0, 1.0]]));
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 1.5).abs() < 1e-15);
        assert_eq!(
            pcgrad_aggregate(&gm(vec![vec![2.0, -1.0]])),
            vec![2.0, -1.0]
        );
    }

    #[test]
    fn cagrad_identical_objectives() {
        let d = cagrad_aggregate(&gm(vec![vec![1.0, 0.0], vec![1.0, 0.0]]), 0.5).unwrap();
        assert!(cosine(&d, &[1.0, 0.0]) > 1.0 - 1e-12);
    }

    #[test]
    fn cagrad_c_zero_is_mean() {
        let d = cagrad_aggregate(&gm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]), 0.0).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    /// Dense grid over the simplex weight, independent of golden section.
    fn cagrad_grid(g1: &[f64], g2: &[f64], c: f64) -> Vec<f64> {
        let g0: Vec<f64> = g1.iter().zip(g2).map(|(a, b)| 0.5 * (a + b)).collect();
        let r = c * norm(&g0);
        let n = 100_000;
        let (mut best_w, mut best) = (0.0, f64::INFINITY);
        for s in 0..=n {
            let w = s as f64 / n as f64;
            let gw: Vec<f64> = g1
                .iter()
                .zip(g2)
                .map(|(a, b)| w * a + (1.0 - w) * b)
                .collect();
            let v = dot(&gw, &g0) + r * norm(&gw);
            if v < best {
                best = v;
                best_w = w;
            }
        }
        let gw: Vec<f64> = g1
            .iter()
            .zip(g2)
            .map(|(a, b)| best_w * a + (1.0 - best_w) * b)
            .collect();
        let nw = norm(&gw);
        g0.iter().zip(&gw).map(|(a, b)| a + r / nw * b).collect()
    }

    #[test]
    fn cagrad_matches_grid_oracle() {
        let cases = [
            (vec![1.0, 0.0], vec![0.0, 1.0]),
            (vec![1.0, 0.2], vec![-0.7, 1.0]),
            (vec![3.0, -1.0], vec![0.5, 2.0]),
        ];
        for (a, b) in cases {
            let d = cagrad_aggregate(&gm(vec![a.clone(), b.clone()]), 0.5).unwrap();
            let o = cagrad_grid(&a, &b, 0.5);
            assert!(cosine(&d, &o) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn cagrad_rejects_three_objectives() {
        let g = gm(vec![vec![1.0], vec![2.0], vec![3.0]]);
        assert!(matches!(
            cagrad_aggregate(&g, 0.5),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn gm_degenerate_cases() {
        let g = gm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = generalized_mean_aggregate(&g, &[3.0, 4.0], 1.0).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        let d = generalized_mean_aggregate(&g, &[2.0, 2.0], 3.0).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
        assert!(generalized_mean_aggregate(&g, &[0.0, 1.0], 2.0).is_err());
    }

    #[test]
    fn gm_matches_finite_differences() {
        // L_i(θ) = l_i + g_iᵀθ around θ = 0, so ∂GM/∂θ = Σ ∂GM/∂L_i g_i.
        let losses = [3.0, 4.0];
        let g = gm(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = generalized_mean_aggregate(&g, &losses, 2.0).unwrap();
        let scalar =
            |t: [f64; 2]| (((losses[0] + t[0]).powi(2) + (losses[1] + t[1]).powi(2)) / 2.0).sqrt();
        let h = 1e-6;
        let fd = [
            (scalar([h, 0.0]) - scalar([-h, 0.0])) / (2.0 * h),
            (scalar([0.0, h]) - scalar([0.0, -h])) / (2.0 * h),
        ];
        let expect = [3.0 / (2.0 * 12.5f64.sqrt()), 4.0 / (2.0 * 12.5f64.sqrt())];
        for i in 0..2 {
            assert!((d[i] - fd[i]).abs() < 1e-8);
            assert!((d[i] - expect[i]).abs() < 1e-12);
        }
    }
}
