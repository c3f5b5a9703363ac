//! Finite-difference helpers shared by the property tests and the
//! acceptance suite.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unbalance_lab::losses::{self, LossSpec};
use unbalance_lab::net::{init_params, Activation, LayerSpec, NetworkParams};
use unbalance_lab::train::{brnn_trunk_objective, BrnnModel, BrnnSpec};

pub const STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / scale
}

pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Per-example `dloss/dp` against a central difference at `p`.
pub fn loss_fd_error(spec: &LossSpec, y: u8, d: u8, p: f64) -> f64 {
    let f = |q: f64| spec.per_example(y, d, q).expect("per-example loss").loss;
    let numeric = (f(p + STEP) - f(p - STEP)) / (2.0 * STEP);
    relative_error(spec.per_example(y, d, p).unwrap().dloss_dp, numeric)
}

/// A random batch whose four `(y, z)` cells are all populated.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, width: usize) -> (Array2<f64>, Vec<u8>, Vec<u8>) {
    assert!(n >= 4);
    let x = Array2::from_shape_fn((n, width), |_| rng.random_range(-2.0..2.0));
    let y: Vec<u8> = (0..n).map(|i| if i < 4 { (i / 2) as u8 } else { rng.random_range(0..2) }).collect();
    let z: Vec<u8> = (0..n).map(|i| if i < 4 { (i % 2) as u8 } else { rng.random_range(0..2) }).collect();
    (x, y, z)
}

/// Batch-mean loss through the network, and its analytic and numeric
/// parameter gradients.
pub fn network_fd_error(spec: &LossSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer_spec = LayerSpec::classifier(6, &[5, 4]).with_activation(Activation::Tanh);
    let params = init_params(&layer_spec, seed).unwrap();
    let (x, y, z) = random_batch(&mut rng, 16, 6);
    let d: Vec<u8> = y.iter().zip(&z).map(|(&a, &b)| a ^ b).collect();
    let objective = |p: &NetworkParams| {
        let trace = p.forward(x.view()).unwrap();
        spec.batch(&y, &d, Some(&z), trace.p()).unwrap()
    };
    let trace = params.forward(x.view()).unwrap();
    let batch = objective(&params);
    let analytic = params.backward(&trace, batch.dl_dp.view()).unwrap().flatten();
    let numeric = numeric_gradient(&params, |p| objective(p).loss);
    vector_relative_error(&analytic, &numeric)
}

fn numeric_gradient(params: &NetworkParams, f: impl Fn(&NetworkParams) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut probe = params.clone();
    (0..flat.len())
        .map(|i| {
            let mut v = flat.clone();
            v[i] = flat[i] + STEP;
            probe.set_flat(&v).unwrap();
            let up = f(&probe);
            v[i] = flat[i] - STEP;
            probe.set_flat(&v).unwrap();
            let down = f(&probe);
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Trunk gradient of `mean H* − δ·r²` against central differences. Tanh
/// keeps the check away from ReLU kinks, which zero-bias init can place
/// exactly at a pre-activation of 0.
pub fn brnn_fd_error(seed: u64, delta: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = BrnnSpec::new(6, &[5], 3, delta);
    spec.trunk = spec.trunk.with_activation(Activation::Tanh);
    let model = BrnnModel::init(&spec, seed).unwrap();
    let (x, y, z) = random_batch(&mut rng, 16, 6);
    let (_, grads) = brnn_trunk_objective(&model, x.view(), &y, &z, delta).unwrap();
    let numeric = numeric_gradient(&model.trunk, |trunk| {
        let m = BrnnModel {
            trunk: trunk.clone(),
            ..model.clone()
        };
        brnn_trunk_objective(&m, x.view(), &y, &z, delta).unwrap().0
    });
    vector_relative_error(&grads.flatten(), &numeric)
}

/// The non-batch loss families with representative hyperparameters.
pub fn per_example_specs(rng: &mut ChaCha8Rng) -> Vec<LossSpec> {
    vec![
        LossSpec::StandardCe,
        LossSpec::WeightedCe {
            c: rng.random_range(0.05..0.95),
        },
        LossSpec::Cc {
            class_weight: rng.random_range(1.0..1000.0),
        },
        LossSpec::Focal {
            k: rng.random_range(1.0..20.0),
            alpha: rng.random_range(0.0..5.0),
        },
        LossSpec::Fbi {
            k: rng.random_range(1.0..20.0),
            xi: rng.random_range(0.0..5.0),
        },
    ]
}

/// PEO batch loss gradient in `p`, skipping points within one step of a kink
/// (a zero gap or the `ε` hinge), where the derivative does not exist.
pub fn peo_fd_error(rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = 12;
    let y: Vec<u8> = (0..n).map(|i| if i < 4 { (i / 2) as u8 } else { rng.random_range(0..2) }).collect();
    let z: Vec<u8> = (0..n).map(|i| if i < 4 { (i % 2) as u8 } else { rng.random_range(0..2) }).collect();
    let p: Array1<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
    let lambda = rng.random_range(0.0..2.0);
    let epsilon = rng.random_range(0.0..0.1);
    let proxy = losses::eo_proxy(&y, &z, p.view()).unwrap();
    let margin = 4.0 * STEP;
    let gaps = [
        proxy.soft_fpr[0] - proxy.soft_fpr[1],
        proxy.soft_fnr[0] - proxy.soft_fnr[1],
    ];
    if gaps.iter().any(|g| g.abs() < margin) || (proxy.value - epsilon).abs() < margin {
        return None;
    }
    let f = |q: &Array1<f64>| losses::peo_batch_loss(&y, &z, q.view(), lambda, epsilon).loss;
    let analytic = losses::peo_batch_loss(&y, &z, p.view(), lambda, epsilon).dl_dp / n as f64;
    let numeric: Vec<f64> = (0..n)
        .map(|i| {
            let mut up = p.clone();
            up[i] += STEP;
            let mut down = p.clone();
            down[i] -= STEP;
            (f(&up) - f(&down)) / (2.0 * STEP)
        })
        .collect();
    Some(vector_relative_error(analytic.as_slice().unwrap(), &numeric))
}
