//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use leaware_core::diffengine::{self, Activation, Batch, ModelSpec, OutputKind};
use leaware_core::{Matrix, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_vector(dim: usize, seed: u64) -> ParamVector {
    let mut r = rng(seed);
    ParamVector::new((0..dim).map(|_| 2.0 * r.random::<f64>() - 1.0).collect()).unwrap()
}

/// Random batch matching the model's input and output shape.
pub fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Batch {
    let x = random_matrix(n, spec.input_dim(), 1.5, seed);
    let k = spec.output_dim();
    match spec.output() {
        OutputKind::SoftmaxCrossEntropy => {
            let mut r = rng(seed ^ 0xabcd);
            Batch::classification(x, (0..n).map(|_| r.random_range(0..k)).collect()).unwrap()
        }
        OutputKind::MeanSquaredError => Batch::regression(x, random_matrix(n, k, 1.0, seed ^ 0x1234)).unwrap(),
    }
}

/// The architectures used by the derivative checks.
pub fn architectures() -> Vec<ModelSpec> {
    use Activation::*;
    use OutputKind::*;
    [
        (vec![2, 2], Tanh, SoftmaxCrossEntropy),
        (vec![2, 16, 2], Tanh, SoftmaxCrossEntropy),
        (vec![2, 16, 16, 2], Tanh, SoftmaxCrossEntropy),
        (vec![3, 8, 8, 4], Relu, SoftmaxCrossEntropy),
        (vec![5, 10, 3], Tanh, MeanSquaredError),
        (vec![4, 6, 5, 3, 2], Relu, MeanSquaredError),
    ]
    .into_iter()
    .map(|(l, a, o)| ModelSpec::new(l, a, o).unwrap())
    .collect()
}

/// Central finite-difference gradient of the loss.
pub fn fd_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch, wd: f64, h: f64) -> Vec<f64> {
    let theta = params.as_slice();
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[i] += h;
            m[i] -= h;
            let lp = diffengine::loss(spec, &ParamVector::new(p).unwrap(), batch, wd).unwrap();
            let lm = diffengine::loss(spec, &ParamVector::new(m).unwrap(), batch, wd).unwrap();
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

/// Dense Hessian, column by column from central differences of the exact
/// gradient, symmetrized.
pub fn dense_hessian(spec: &ModelSpec, params: &ParamVector, batch: &Batch, wd: f64, h: f64) -> nalgebra::DMatrix<f64> {
    let theta = params.as_slice();
    let n = theta.len();
    let mut hess = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        let mut p = theta.to_vec();
        let mut m = theta.to_vec();
        p[j] += h;
        m[j] -= h;
        let gp = diffengine::grad(spec, &ParamVector::new(p).unwrap(), batch, wd).unwrap();
        let gm = diffengine::grad(spec, &ParamVector::new(m).unwrap(), batch, wd).unwrap();
        for i in 0..n {
            hess[(i, j)] = (gp.as_slice()[i] - gm.as_slice()[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Per-sample forward pass written out with explicit loops, independent of
/// the engine's layout helpers: weights row-major `fan_out × fan_in`, then
/// biases.
pub fn naive_forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let sizes = spec.layer_sizes();
    let mut a = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let w = &params[off..off + fi * fo];
        let b = &params[off + fi * fo..off + fi * fo + fo];
        off += fi * fo + fo;
        let mut z = vec![0.0; fo];
        for o in 0..fo {
            let mut s = b[o];
            for i in 0..fi {
                s += w[o * fi + i] * a[i];
            }
            z[o] = s;
        }
        let last = l == sizes.len() - 2;
        a = if last {
            z
        } else {
            z.into_iter()
                .map(|v| match spec.activation() {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                })
                .collect()
        };
    }
    a
}

/// Relative error with a floor for near-zero components.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
