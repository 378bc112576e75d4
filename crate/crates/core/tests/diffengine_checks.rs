mod common;

use common::*;
use leaware_core::diffengine::{self, Activation, Batch, ModelSpec, OutputKind};
use leaware_core::{Matrix, ParamVector};
use proptest::prelude::*;

const SEEDS: [u64; 3] = [1, 2, 3];

#[test]
fn reverse_mode_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for spec in architectures() {
        for seed in SEEDS {
            let params = spec.init_params(seed);
            let batch = random_batch(&spec, 12, seed + 100);
            let g = diffengine::grad(&spec, &params, &batch, 5e-4).unwrap();
            let fd = fd_grad(&spec, &params, &batch, 5e-4, 1e-6);
            for (a, b) in g.as_slice().iter().zip(&fd) {
                worst = worst.max(rel_err(*a, *b, 1e-4));
            }
        }
    }
    assert!(worst < 1e-5, "max relative error {worst:e}");
}

#[test]
fn forward_matches_naive_loops() {
    for spec in architectures() {
        let params = spec.init_params(9);
        let x = random_matrix(7, spec.input_dim(), 2.0, 4);
        let out = diffengine::predict(&spec, &params, &x).unwrap();
        for i in 0..x.rows() {
            let naive = naive_forward(&spec, params.as_slice(), x.row(i));
            for (a, b) in out.row(i).iter().zip(&naive) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn loss_values_from_scratch() {
    // Two-class CE with zero weights is ln 2 per sample; γ adds ½γ‖θ‖².
    let spec = ModelSpec::new(vec![3, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap();
    let x = random_matrix(5, 3, 1.0, 1);
    let batch = Batch::classification(x, vec![0, 1, 1, 0, 1]).unwrap();
    let zero = ParamVector::zeros(spec.parameter_count());
    let l = diffengine::loss(&spec, &zero, &batch, 0.3).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

    let params = spec.init_params(2);
    let base = diffengine::loss(&spec, &params, &batch, 0.0).unwrap();
    let reg = diffengine::loss(&spec, &params, &batch, 0.3).unwrap();
    let sq: f64 = params.as_slice().iter().map(|v| v * v).sum();
    assert!((reg - base - 0.15 * sq).abs() < 1e-12);
}

#[test]
fn hvp_matches_dense_hessian() {
    let specs = [
        ModelSpec::new(vec![2, 6, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap(),
        ModelSpec::new(vec![3, 4, 4, 2], Activation::Tanh, OutputKind::MeanSquaredError).unwrap(),
    ];
    for spec in specs {
        assert!(spec.parameter_count() <= 50);
        for seed in SEEDS {
            let params = spec.init_params(seed);
            let batch = random_batch(&spec, 10, seed + 7);
            let hess = dense_hessian(&spec, &params, &batch, 5e-4, 1e-5);
            let v = random_vector(spec.parameter_count(), seed + 11);
            let hv = diffengine::hvp(&spec, &params, &batch, &v, 5e-4, 1e-4).unwrap();
            let dense = &hess * nalgebra::DVector::from_column_slice(v.as_slice());
            let err = (nalgebra::DVector::from_column_slice(hv.as_slice()) - &dense).norm() / dense.norm();
            assert!(err < 1e-3, "relative error {err:e}");
        }
    }
}

#[test]
fn regularizer_shifts_hvp_by_gamma_v() {
    let spec = ModelSpec::new(vec![2, 8, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap();
    let params = spec.init_params(4);
    let batch = random_batch(&spec, 16, 5);
    let v = random_vector(spec.parameter_count(), 6);
    let h0 = diffengine::hvp(&spec, &params, &batch, &v, 0.0, 1e-4).unwrap();
    let h1 = diffengine::hvp(&spec, &params, &batch, &v, 0.01, 1e-4).unwrap();
    for ((a, b), vi) in h1.as_slice().iter().zip(h0.as_slice()).zip(v.as_slice()) {
        assert!((a - b - 0.01 * vi).abs() < 1e-12);
    }
}

#[test]
fn quadratic_fixture_is_exact() {
    let a = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let theta = ParamVector::new(vec![1.0, -2.0]).unwrap();
    let (l, g) = diffengine::qloss(&a, &theta).unwrap();
    // ½(2·1 + 2·0.5·1·(−2) + 1·4) = ½(2 − 2 + 4)
    assert_eq!(l, 2.0);
    assert_eq!(g.as_slice(), &[1.0, -1.5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_linear_in_v(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let spec = ModelSpec::new(vec![2, 5, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap();
        let params = spec.init_params(seed);
        let batch = random_batch(&spec, 8, seed + 1);
        let u = random_vector(spec.parameter_count(), seed + 2);
        let w = random_vector(spec.parameter_count(), seed + 3);
        let hvp = |v: &ParamVector| diffengine::hvp(&spec, &params, &batch, v, 5e-4, 1e-4).unwrap();
        let combo = u.add_scaled(alpha, &w).unwrap();
        let lhs = hvp(&combo);
        let rhs = hvp(&u).add_scaled(alpha, &hvp(&w)).unwrap();
        let scale = rhs.norm().max(1e-3);
        prop_assert!(lhs.sub(&rhs).unwrap().norm() / scale < 1e-4);
    }

    #[test]
    fn gradient_descends(seed in 0u64..1000) {
        let spec = ModelSpec::new(vec![2, 6, 3], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap();
        let params = spec.init_params(seed);
        let batch = random_batch(&spec, 10, seed + 5);
        let (l0, g) = diffengine::loss_and_grad(&spec, &params, &batch, 1e-3).unwrap();
        let step = params.add_scaled(-1e-4, &g).unwrap();
        let l1 = diffengine::loss(&spec, &step, &batch, 1e-3).unwrap();
        prop_assert!(l1 <= l0);
    }
}
