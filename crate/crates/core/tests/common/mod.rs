//! Finite-difference gradient checking shared by the test targets.

#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use mesh_core::linalg::{row_softmax, Matrix};
use mesh_core::model::{backward, forward, DenseGrad, Dropout, Gradients, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

pub fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn flat_grads(g: &Gradients) -> Vec<&DenseGrad> {
    let mut out: Vec<&DenseGrad> = g.encoder.iter().flatten().collect();
    out.extend(g.bottleneck.iter());
    out.extend(g.classifier.iter());
    out
}

fn with_param(params: &ModelParams, layer: usize, idx: usize, delta: f64) -> ModelParams {
    let mut p = params.clone();
    let (_, dense) = p.layers_mut().nth(layer).unwrap();
    let nw = dense.weight.as_slice().len();
    if idx < nw {
        dense.weight.as_mut_slice()[idx] += delta;
    } else {
        dense.bias[idx - nw] += delta;
    }
    p
}

/// Compares every parameter and input gradient with central differences.
/// Returns the worst relative error, or a description of the first miss.
pub fn check(
    name: &str,
    params: &ModelParams,
    x: &Matrix,
    loss: impl Fn(&ModelParams, &Matrix) -> f64,
    analytic: &Gradients,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let grads = flat_grads(analytic);
    if grads.len() != params.layers().count() {
        return Err(format!("{name}: missing gradient groups"));
    }
    for (l, g) in grads.iter().enumerate() {
        let flat: Vec<f64> = g.weight.as_slice().iter().chain(&g.bias).copied().collect();
        for (i, &a) in flat.iter().enumerate() {
            let up = loss(&with_param(params, l, i, H), x);
            let down = loss(&with_param(params, l, i, -H), x);
            let n = (up - down) / (2.0 * H);
            let e = rel_err(a, n);
            if !(e < TOL) {
                return Err(format!(
                    "{name}: layer {l} param {i}: analytic {a} numeric {n} (rel {e:.2e})"
                ));
            }
            worst = worst.max(e);
        }
    }
    for i in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += H;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= H;
        let n = (loss(params, &xp) - loss(params, &xm)) / (2.0 * H);
        let a = analytic.input.as_slice()[i];
        let e = rel_err(a, n);
        if !(e < TOL) {
            return Err(format!(
                "{name}: input {i}: analytic {a} numeric {n} (rel {e:.2e})"
            ));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn proba(params: &ModelParams, x: &Matrix, dropout: Dropout) -> Matrix {
    row_softmax(&forward(params, x, dropout).unwrap().0)
}

/// Gradients of a loss whose logit seed is `seed_fn(softmax(logits))`.
pub fn analytic_for(
    params: &ModelParams,
    x: &Matrix,
    dropout: Dropout,
    seed_fn: impl Fn(&Matrix) -> Matrix,
) -> Gradients {
    let (logits, cache) = forward(params, x, dropout).unwrap();
    let d = seed_fn(&row_softmax(&logits));
    backward(params, &cache, &d).unwrap()
}
