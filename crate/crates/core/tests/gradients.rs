mod common;

use common::*;
use nashmeta::linalg::{dot, Matrix};
use nashmeta::metalearn::{group_hypergradients, weighted_param_update, EpsilonVector, WeightNorm};
use nashmeta::nn::{ForwardMode, MlpModel, SgdConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn example_loss(model: &MlpModel, params: &[f64], x: &Matrix, y: &[usize], i: usize) -> f64 {
    let m = model.with_params(params.to_vec()).unwrap();
    let row = x.select_rows(&[i]);
    m.mean_loss(&row, &y[i..=i]).unwrap()
}

#[test]
fn per_example_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = toy_batch(&mut rng, 5, 2);
    let model = tiny_model(2, 3, 7);
    assert!(model.num_params() <= 50);
    let pe = model
        .per_example_gradients(&x, &y, ForwardMode::Eval)
        .unwrap();
    let h = 1e-6;
    for i in 0..x.rows() {
        for p in 0..model.num_params() {
            let mut up = model.params().to_vec();
            let mut down = up.clone();
            up[p] += h;
            down[p] -= h;
            let fd = (example_loss(&model, &up, &x, &y, i)
                - example_loss(&model, &down, &x, &y, i))
                / (2.0 * h);
            let an = pe.grads.get(i, p);
            assert!(
                (fd - an).abs() <= 1e-7 * an.abs().max(1.0),
                "example {i} param {p}: {fd} vs {an}"
            );
        }
    }
}

#[test]
fn mean_of_rows_is_batch_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = toy_batch(&mut rng, 7, 3);
    let model = tiny_model(3, 4, 3);
    let pe = model
        .per_example_gradients(&x, &y, ForwardMode::Eval)
        .unwrap();
    let w = vec![1.0 / 7.0; 7];
    let (loss, grad) = model
        .weighted_loss_gradient(&x, &y, &w, ForwardMode::Eval)
        .unwrap();
    let mean = pe.weighted_sum(&w);
    for (a, b) in grad.iter().zip(&mean) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!((loss - pe.losses.iter().sum::<f64>() / 7.0).abs() <= 1e-12);
    assert!((loss - model.mean_loss(&x, &y).unwrap()).abs() <= 1e-12);
}

#[test]
fn dropout_masks_follow_the_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = toy_batch(&mut rng, 4, 3);
    let model = MlpModel::new(tiny_model(3, 8, 0).shape(), 0.5, 0).unwrap();
    let a = model
        .per_example_gradients(&x, &y, ForwardMode::Train { mask_seed: 9 })
        .unwrap();
    let b = model
        .per_example_gradients(&x, &y, ForwardMode::Train { mask_seed: 9 })
        .unwrap();
    let c = model
        .per_example_gradients(&x, &y, ForwardMode::Train { mask_seed: 10 })
        .unwrap();
    assert_eq!(a.grads, b.grads);
    assert_ne!(a.grads, c.grads);
}

/// The applied weights are `max((∇_θ φᵀL_val)ᵀ ∇_θ ℓ_i, 0)` up to one positive factor.
#[test]
fn applied_weights_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = toy_batch(&mut rng, 12, 3);
    let val = toy_val_groups(&mut rng, 3, 6, 3);
    let phi = [1.0, -1.0, 0.5];
    for norm in [WeightNorm::L2, WeightNorm::L1] {
        let mut model = tiny_model(3, 5, 4);
        let before = model.clone();
        let hg = group_hypergradients(&model, &x, &y, &val, 0.1).unwrap();
        let eps = EpsilonVector(hg.combine(&phi));
        let w = weighted_param_update(&mut model, &x, &y, &eps, 0.1, SgdConfig::default(), norm, 0)
            .unwrap();

        let mut val_dir = vec![0.0; before.num_params()];
        for (g, p) in val.iter().zip(phi) {
            let n = g.labels.len();
            let (_, grad) = before
                .weighted_loss_gradient(
                    &g.features,
                    &g.labels,
                    &vec![1.0 / n as f64; n],
                    ForwardMode::Eval,
                )
                .unwrap();
            nashmeta::linalg::axpy(p, &grad, &mut val_dir);
        }
        let pe = before
            .per_example_gradients(&x, &y, ForwardMode::Eval)
            .unwrap();
        let raw: Vec<f64> = pe
            .grads
            .iter_rows()
            .map(|b| dot(&val_dir, b).max(0.0))
            .collect();
        let i_max = (0..raw.len())
            .max_by(|&a, &b| raw[a].total_cmp(&raw[b]))
            .unwrap();
        assert!(raw[i_max] > 0.0, "instance has no aligned example");
        let factor = w[i_max] / raw[i_max];
        assert!(factor > 0.0);
        for (wi, ri) in w.iter().zip(&raw) {
            assert!(
                (wi - factor * ri).abs() <= 1e-8 * wi.abs().max(1e-3),
                "{wi} vs {}",
                factor * ri
            );
        }
    }
}
