mod common;

use common::{rel_err, RefNet};
use ficabu_core::fisher::{estimate_importance, ImportanceSource};
use ficabu_core::nn::{LabeledBatch, Model};
use ficabu_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(shape: &[usize], classes: usize, n: usize, rng: &mut ChaCha8Rng) -> LabeledBatch {
    let len: usize = shape.iter().product();
    let mut b = LabeledBatch::default();
    for _ in 0..n {
        let x = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.push(Tensor::new(shape.to_vec(), x).unwrap(), rng.gen_range(0..classes));
    }
    b
}

/// Share of parameters whose analytic Fisher matches the f64 oracle.
fn agreement(model: &Model, data: &LabeledBatch, tol: f64) -> f64 {
    let analytic = estimate_importance(model, data, ImportanceSource::Global).unwrap();
    let oracle = RefNet::from_model(model).fd_fisher(data, 1e-3);
    let (mut ok, mut total) = (0usize, 0usize);
    for l in 1..=model.depth() {
        for (t, a) in analytic.layer(l).unwrap().iter().enumerate() {
            for (i, &v) in a.data().iter().enumerate() {
                total += 1;
                if rel_err(v as f64, oracle[l - 1][t][i]) < tol {
                    ok += 1;
                }
            }
        }
    }
    ok as f64 / total as f64
}

#[test]
fn reference_forward_agrees_with_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Model::tiny_cnn(2, 4, 4, 5, 3, &mut rng).unwrap();
    let net = RefNet::from_model(&m);
    let b = batch(&[2, 4, 4], 3, 4, &mut rng);
    for (x, &y) in b.inputs.iter().zip(&b.labels) {
        let lib = ficabu_core::nn::log_likelihood(&ficabu_core::nn::forward(&m, x).unwrap(), y);
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        assert!((lib - net.loglik(&xs, x.shape(), y)).abs() < 1e-5);
    }
}

#[test]
fn mlp_fisher_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Model::mlp(&[16, 8, 5], &mut rng).unwrap();
    let b = batch(&[16], 5, 16, &mut rng);
    assert!(agreement(&m, &b, 1e-4) >= 0.99);
}

#[test]
fn deep_mlp_fisher_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = Model::mlp(&[6, 10, 8, 4], &mut rng).unwrap();
    let b = batch(&[6], 4, 8, &mut rng);
    assert!(agreement(&m, &b, 1e-4) >= 0.98);
}

#[test]
fn cnn_fisher_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = Model::tiny_cnn(1, 4, 4, 6, 3, &mut rng).unwrap();
    let b = batch(&[1, 4, 4], 3, 6, &mut rng);
    assert!(agreement(&m, &b, 1e-4) >= 0.98);
}
