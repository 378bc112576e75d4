mod common;

use common::*;
use leaware_core::diffengine::{self, Activation, ModelSpec, OutputKind, QuadraticLoss};
use leaware_core::lyapunov::{self, Map1d, PerturbationState, PropagationMethod};
use leaware_core::{Matrix, ParamVector};
use proptest::prelude::*;

fn diag_quadratic() -> QuadraticLoss {
    QuadraticLoss::new(Matrix::diag(&[1.0, 3.0])).unwrap()
}

/// Largest `ln|1 − ηλ|` over the spectrum of a symmetric matrix.
fn dominant_multiplier(a: &Matrix, lr: f64) -> f64 {
    let n = a.rows();
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
    m.symmetric_eigenvalues()
        .iter()
        .map(|l| (1.0 - lr * l).abs().ln())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn tangent_le(q: &QuadraticLoss, lr: f64, state: &mut PerturbationState, steps: usize) -> f64 {
    for _ in 0..steps {
        let hv = q.hvp(&state.delta_vector()).unwrap();
        lyapunov::propagate_tangent(state, &hv, lr).unwrap();
    }
    lyapunov::le_estimate(state, PropagationMethod::Tangent).unwrap().value
}

#[test]
fn quadratic_tangent_converges_to_dominant_multiplier() {
    let q = diag_quadratic();
    // Seed 0 starts at cos ≈ 0.98 to the dominant eigenvector; the
    // finite-time bias is ln|cos|/T.
    let mut state = lyapunov::init_perturbation(2, 1e-6, 0).unwrap();
    let le = tangent_le(&q, 0.1, &mut state, 500);
    let oracle = dominant_multiplier(q.matrix(), 0.1);
    assert!((oracle - 0.9f64.ln()).abs() < 1e-12);
    assert!((le - oracle).abs() < 1e-3, "{le} vs {oracle}");
}

#[test]
fn finite_time_estimate_matches_closed_form() {
    // For diag(1, 3) the T-step product is diag(0.9^T, 0.7^T).
    let q = diag_quadratic();
    for seed in 0..10 {
        let mut state = lyapunov::init_perturbation(2, 1e-6, seed).unwrap();
        let d0 = state.delta().to_vec();
        let le = tangent_le(&q, 0.1, &mut state, 500);
        let t = 500.0;
        let (a, b) = (d0[0].abs().ln() + t * 0.9f64.ln(), d0[1].abs().ln() + t * 0.7f64.ln());
        let hi = a.max(b);
        let log_norm_t = hi + 0.5 * (1.0 + (2.0 * (a.min(b) - hi)).exp()).ln();
        let exact = (log_norm_t - 1e-6f64.ln()) / t;
        assert!((le - exact).abs() < 1e-12, "seed {seed}: {le} vs {exact}");
    }
}

#[test]
fn random_quadratics_match_eigen_oracle() {
    for seed in 0..5 {
        let b = random_matrix(6, 6, 1.0, seed);
        // A = BᵀB/6 + 0.1·I is symmetric positive definite.
        let mut a = Matrix::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let s: f64 = (0..6).map(|k| b.get(k, i) * b.get(k, j)).sum();
                a.set(i, j, s / 6.0 + if i == j { 0.1 } else { 0.0 });
            }
        }
        let q = QuadraticLoss::new(a.clone()).unwrap();
        let mut state = lyapunov::init_perturbation(6, 1e-6, seed + 10).unwrap();
        let le = tangent_le(&q, 0.2, &mut state, 3000);
        let oracle = dominant_multiplier(&a, 0.2);
        assert!((le - oracle).abs() < 2e-3, "seed {seed}: {le} vs {oracle}");
    }
}

#[test]
fn bound_sandwich_on_quadratic() {
    let q = diag_quadratic();
    let mut state = lyapunov::init_perturbation(2, 1e-6, 5).unwrap();
    let le = tangent_le(&q, 0.1, &mut state, 500);
    let n = 500;
    let bounds = lyapunov::le_bounds(&vec![0.1; n], &vec![3.0; n], &vec![0.9; n]).unwrap();
    assert!((bounds.lower - 0.7f64.ln()).abs() < 1e-12);
    assert!((bounds.upper - 0.9f64.ln()).abs() < 1e-12);
    assert!(bounds.lower <= le && le <= bounds.upper + 1e-12, "{bounds:?} vs {le}");

    // The power-iteration norms agree with the exact ones on the fixture.
    let h = lyapunov::hessian_norm(|v| q.hvp(v), 2, 50, 1).unwrap();
    let op = lyapunov::update_operator_norm(|v| q.hvp(v), 0.1, 2, 50, 1).unwrap();
    assert!((h - 3.0).abs() < 1e-9);
    assert!((op - 0.9).abs() < 1e-9);
}

#[test]
fn methods_agree_on_quadratic() {
    let a = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap();
    let q = QuadraticLoss::new(a).unwrap();
    for mag in [1e-6, 1e-7] {
        let mut tan = lyapunov::init_perturbation(2, mag, 8).unwrap();
        let mut two = tan.clone();
        let le_tan = tangent_le(&q, 0.3, &mut tan, 300);
        let mut theta = ParamVector::new(vec![0.7, -1.2]).unwrap();
        let mut pert = theta.add_scaled(1.0, &two.delta_vector()).unwrap();
        for _ in 0..300 {
            let (t, p) = lyapunov::propagate_two_trajectory(&theta, &pert, |x| q.grad(x), 0.3, &mut two).unwrap();
            theta = t;
            pert = p;
        }
        let le_two = lyapunov::le_estimate(&two, PropagationMethod::TwoTrajectory).unwrap().value;
        assert!((le_tan - le_two).abs() < 1e-6, "{le_tan} vs {le_two}");
    }
}

#[test]
fn methods_agree_on_mlp() {
    let spec = ModelSpec::new(vec![2, 16, 2], Activation::Tanh, OutputKind::SoftmaxCrossEntropy).unwrap();
    let batch = random_batch(&spec, 32, 77);
    let lr = 0.5;
    for mag in [1e-5, 1e-6, 1e-7] {
        let mut theta = spec.init_params(4);
        let start = lyapunov::init_perturbation(spec.parameter_count(), mag, 9).unwrap();
        let mut tan = start.clone();
        let mut two = start;
        let mut pert = theta.add_scaled(1.0, &two.delta_vector()).unwrap();
        for _ in 0..200 {
            let hv = diffengine::hvp(&spec, &theta, &batch, &tan.delta_vector(), 5e-4, 1e-4).unwrap();
            lyapunov::propagate_tangent(&mut tan, &hv, lr).unwrap();
            let g = |p: &ParamVector| diffengine::grad(&spec, p, &batch, 5e-4);
            let (t, p) = lyapunov::propagate_two_trajectory(&theta, &pert, g, lr, &mut two).unwrap();
            theta = t;
            pert = p;
        }
        let a = lyapunov::le_estimate(&tan, PropagationMethod::Tangent).unwrap().value;
        let b = lyapunov::le_estimate(&two, PropagationMethod::TwoTrajectory).unwrap().value;
        assert!((a - b).abs() < 0.05, "magnitude {mag}: {a} vs {b}");
    }
}

#[test]
fn renormalization_is_transparent() {
    // Expanding 1-D map δ ↦ 1.1·δ: renormalization fires every ~73 steps.
    let expand = |state: &mut PerturbationState, steps: usize| {
        for _ in 0..steps {
            let hv = state.delta_vector().scaled(-1.0).unwrap();
            lyapunov::propagate_tangent(state, &hv, 0.1).unwrap();
        }
    };
    let mut long = lyapunov::init_perturbation(3, 1e-6, 2).unwrap();
    expand(&mut long, 2000);
    assert!(long.renorm_count() > 0);
    let mut short = lyapunov::init_perturbation(3, 1e-6, 2).unwrap();
    expand(&mut short, 60);
    assert_eq!(short.renorm_count(), 0);
    let a = lyapunov::le_estimate(&long, PropagationMethod::Tangent).unwrap().value;
    let b = lyapunov::le_estimate(&short, PropagationMethod::Tangent).unwrap().value;
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    assert!((a - 1.1f64.ln()).abs() < 1e-9);
}

#[test]
fn one_dimensional_maps() {
    let le = |m, x0, n| lyapunov::map_le(m, x0, n).unwrap().value;
    assert!((le(Map1d::Logistic(4.0), 0.3, 100_000) - 2f64.ln()).abs() < 0.02);
    assert!((le(Map1d::Logistic(2.5), 0.3, 100_000) - 0.5f64.ln()).abs() < 1e-3);
    assert!((le(Map1d::Tent(2.0), 0.3, 50) - 2f64.ln()).abs() < 1e-12);
    assert!(lyapunov::map_le(Map1d::Logistic(4.5), 0.3, 10).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_maps_recover_ln_abs_a(a in prop_oneof![-0.999f64..-0.001, 0.001f64..0.999, 1.001f64..3.0], x0 in -5.0f64..5.0) {
        let est = lyapunov::map_le(Map1d::Linear(a), x0, 200).unwrap();
        prop_assert!((est.value - a.abs().ln()).abs() < 1e-9);
        prop_assert_eq!(est.value > 0.0, a.abs() > 1.0);
    }

    #[test]
    fn doubling_magnitude_leaves_quadratic_le(seed in 0u64..500, mag in 1e-9f64..1e-4) {
        let q = diag_quadratic();
        let mut one = lyapunov::init_perturbation(2, mag, seed).unwrap();
        let mut two = lyapunov::init_perturbation(2, 2.0 * mag, seed).unwrap();
        let a = tangent_le(&q, 0.1, &mut one, 200);
        let b = tangent_le(&q, 0.1, &mut two, 200);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn state_invariants_hold(seed in 0u64..500, lr in 0.01f64..1.5, steps in 1usize..400) {
        let q = diag_quadratic();
        let mut s = lyapunov::init_perturbation(2, 1e-6, seed).unwrap();
        for _ in 0..steps {
            let hv = q.hvp(&s.delta_vector()).unwrap();
            lyapunov::propagate_tangent(&mut s, &hv, lr).unwrap();
            prop_assert!(s.delta_norm() > 0.0 && s.delta_norm().is_finite());
            prop_assert!(s.log_stretch_sum().is_finite());
            prop_assert!(s.steps() >= s.renorm_count());
            let ratio = s.delta_norm() / s.delta0_norm();
            prop_assert!((1e-3..=1e3).contains(&ratio));
        }
        let est = lyapunov::le_estimate(&s, PropagationMethod::Tangent).unwrap();
        prop_assert_eq!(est.value, s.log_stretch_sum() / s.steps() as f64);
    }

    #[test]
    fn distinct_seeds_give_distinct_directions(a in 0u64..10_000, b in 0u64..10_000) {
        prop_assume!(a != b);
        let x = lyapunov::init_perturbation(8, 1e-6, a).unwrap();
        let y = lyapunov::init_perturbation(8, 1e-6, b).unwrap();
        let cos = leaware_core::linalg::cosine(x.delta(), y.delta());
        prop_assert!(cos.abs() < 0.999);
    }
}
