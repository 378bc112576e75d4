//! Finite-time Lyapunov exponent of the gradient-descent map.
//!
//! A perturbation `δθ` is carried alongside the parameter trajectory and
//! evolved either through the linearized update `δ ← (I − ηH)δ` (tangent
//! propagation) or as the difference of two trajectories advanced by the
//! same map (two-trajectory propagation). Every step contributes
//! `ln(‖δ_new‖/‖δ_old‖)` to a running sum, so the estimate
//!
//! ```text
//! LE_t = (1/t) · Σ ln(‖δ_{s+1}‖/‖δ_s‖) = (1/t) · ln(‖δ_t‖/‖δ_0‖)
//! ```
//!
//! is unaffected by the Benettin rescaling that keeps `‖δ‖` within
//! `[1e-3, 1e3]·‖δ_0‖`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::ParamVector;
use crate::error::{Error, Result};
use crate::linalg;

/// Rescale when `‖δ‖/‖δ_0‖` leaves `[RENORM_LOW, RENORM_HIGH]`.
pub const RENORM_LOW: f64 = 1e-3;
pub const RENORM_HIGH: f64 = 1e3;

/// Default perturbation magnitude, relative to `‖θ_0‖`.
pub const DEFAULT_RELATIVE_MAGNITUDE: f64 = 1e-6;

/// Power-iteration steps used for `‖I − ηH‖`.
pub const DEFAULT_POWER_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMethod {
    TwoTrajectory,
    Tangent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    delta: Vec<f64>,
    delta0_norm: f64,
    log_stretch_sum: f64,
    steps: u64,
    renorm_count: u64,
    merged: bool,
    last_stretch: f64,
}

/// Seeded random direction of norm `magnitude`.
pub fn init_perturbation(dim: usize, magnitude: f64, seed: u64) -> Result<PerturbationState> {
    if dim == 0 {
        return Err(Error::invalid("perturbation dimension must be positive"));
    }
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::invalid(format!(
            "perturbation magnitude must be positive, got {magnitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = linalg::norm(&delta);
    for d in &mut delta {
        *d *= magnitude / n;
    }
    Ok(PerturbationState {
        delta,
        delta0_norm: magnitude,
        log_stretch_sum: 0.0,
        steps: 0,
        renorm_count: 0,
        merged: false,
        last_stretch: 0.0,
    })
}

impl PerturbationState {
    /// Starts from an explicit perturbation vector.
    pub fn from_delta(delta: ParamVector) -> Result<Self> {
        let n = delta.norm();
        if n == 0.0 {
            return Err(Error::invalid("initial perturbation must be non-zero"));
        }
        Ok(Self {
            delta: delta.into_vec(),
            delta0_norm: n,
            log_stretch_sum: 0.0,
            steps: 0,
            renorm_count: 0,
            merged: false,
            last_stretch: 0.0,
        })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_vector(&self) -> ParamVector {
        ParamVector::from_vec_unchecked(self.delta.clone())
    }

    pub fn delta_norm(&self) -> f64 {
        linalg::norm(&self.delta)
    }

    pub fn delta0_norm(&self) -> f64 {
        self.delta0_norm
    }

    pub fn log_stretch_sum(&self) -> f64 {
        self.log_stretch_sum
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn renorm_count(&self) -> u64 {
        self.renorm_count
    }

    /// `ln(‖δ_new‖/‖δ_old‖)` of the most recent step.
    pub fn last_stretch(&self) -> f64 {
        self.last_stretch
    }

    /// The two trajectories collapsed onto each other (`‖δ‖` hit zero).
    pub fn merged(&self) -> bool {
        self.merged
    }

    /// Records the transition `δ → new_delta` and renormalizes.
    fn advance(&mut self, new_delta: Vec<f64>) -> Result<()> {
        let old = self.delta_norm();
        let new = linalg::norm(&new_delta);
        if !new.is_finite() {
            return Err(Error::PerturbationBlowup { last_norm: old });
        }
        self.steps += 1;
        if new == 0.0 {
            self.merged = true;
            self.last_stretch = f64::NEG_INFINITY;
            self.log_stretch_sum = f64::NEG_INFINITY;
            return Ok(());
        }
        self.last_stretch = (new / old).ln();
        self.log_stretch_sum += self.last_stretch;
        self.delta = new_delta;
        renormalize(self);
        Ok(())
    }
}

/// Rescales `δ` back to `‖δ_0‖` when it has drifted outside the
/// `[1e-3, 1e3]` band. The log-stretch sum is not touched.
pub fn renormalize(state: &mut PerturbationState) -> bool {
    let n = state.delta_norm();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    let ratio = n / state.delta0_norm;
    if (RENORM_LOW..=RENORM_HIGH).contains(&ratio) {
        return false;
    }
    let s = state.delta0_norm / n;
    for d in &mut state.delta {
        *d *= s;
    }
    state.renorm_count += 1;
    true
}

/// One step of `δ ← δ − η·(Hδ)`; the caller supplies `Hδ` evaluated at the
/// current parameters.
pub fn propagate_tangent(state: &mut PerturbationState, hvp_of_delta: &ParamVector, lr: f64) -> Result<()> {
    if hvp_of_delta.dim() != state.delta.len() {
        return Err(Error::DimensionMismatch {
            context: "tangent propagation",
            expected: state.delta.len(),
            actual: hvp_of_delta.dim(),
        });
    }
    if state.merged {
        return Ok(());
    }
    let mut next = state.delta.clone();
    linalg::axpy(-lr, hvp_of_delta.as_slice(), &mut next);
    state.advance(next)
}

/// Advances `θ` and `θ̃ = θ + δ` by `θ ← θ − η·∇L(θ)` and records the
/// stretch of their difference. Returns the advanced pair; when
/// renormalization fires, `θ̃'` is re-centred on `θ'` with the rescaled `δ`.
pub fn propagate_two_trajectory<F>(
    theta: &ParamVector,
    theta_pert: &ParamVector,
    mut grad_fn: F,
    lr: f64,
    state: &mut PerturbationState,
) -> Result<(ParamVector, ParamVector)>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    if theta.dim() != state.delta.len() || theta_pert.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            context: "two-trajectory propagation",
            expected: state.delta.len(),
            actual: theta_pert.dim(),
        });
    }
    let g = grad_fn(theta)?;
    let g_pert = grad_fn(theta_pert)?;
    let next = theta.add_scaled(-lr, &g)?;
    let next_pert = theta_pert.add_scaled(-lr, &g_pert)?;
    if state.merged {
        return Ok((next, next_pert));
    }
    let new_delta: Vec<f64> = next_pert
        .as_slice()
        .iter()
        .zip(next.as_slice())
        .map(|(p, q)| p - q)
        .collect();
    let renorms = state.renorm_count;
    state.advance(new_delta)?;
    if state.merged {
        log::warn!("perturbed trajectory merged with the nominal one after {} steps", state.steps);
        return Ok((next, next_pert));
    }
    let next_pert = if state.renorm_count != renorms {
        next.add_scaled(1.0, &state.delta_vector())?
    } else {
        next_pert
    };
    Ok((next, next_pert))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeEstimate {
    /// Nats per step; `-inf` when the trajectories merged.
    pub value: f64,
    pub steps: u64,
    pub method: PropagationMethod,
}

pub fn le_estimate(state: &PerturbationState, method: PropagationMethod) -> Result<LeEstimate> {
    if state.steps == 0 {
        return Err(Error::invalid("no propagation steps recorded yet"));
    }
    let value = if state.merged {
        f64::NEG_INFINITY
    } else {
        state.log_stretch_sum / state.steps as f64
    };
    Ok(LeEstimate {
        value,
        steps: state.steps,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Bracket for the exponent from per-step learning rates, Hessian norms
/// `‖H_i‖` and update-operator norms `‖I − η_i H_i‖`:
/// `mean ln(1 − η_i‖H_i‖) ≤ LE ≤ mean ln‖I − η_i H_i‖`.
///
/// The lower bound is `-inf` as soon as any `1 − η_i‖H_i‖ ≤ 0`.
pub fn le_bounds(lrs: &[f64], hessian_norms: &[f64], operator_norms: &[f64]) -> Result<LeBounds> {
    if lrs.is_empty() {
        return Err(Error::invalid("le_bounds needs at least one step"));
    }
    for (name, len) in [("hessian norms", hessian_norms.len()), ("operator norms", operator_norms.len())] {
        if len != lrs.len() {
            return Err(Error::invalid(format!(
                "{name}: expected {} entries, got {len}",
                lrs.len()
            )));
        }
    }
    let t = lrs.len() as f64;
    let mut lower = 0.0;
    for (lr, h) in lrs.iter().zip(hessian_norms) {
        let arg = 1.0 - lr * h;
        if arg <= 0.0 {
            lower = f64::NEG_INFINITY;
            break;
        }
        lower += arg.ln();
    }
    let upper: f64 = operator_norms.iter().map(|n| n.ln()).sum::<f64>() / t;
    Ok(LeBounds {
        lower: lower / t,
        upper,
    })
}

/// Spectral norm `‖H‖ = max |λ|` by power iteration on a symmetric operator.
pub fn hessian_norm<F>(mut hvp: F, dim: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let mut v = init_perturbation(dim, 1.0, seed)?.delta_vector();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let hv = hvp(&v)?;
        estimate = hv.norm();
        if estimate == 0.0 {
            return Ok(0.0);
        }
        v = hv.scaled(1.0 / estimate)?;
    }
    Ok(estimate)
}

/// `‖I − ηH‖` by power iteration on `(I − ηH)ᵀ(I − ηH)`, which for symmetric
/// `H` is `(I − ηH)²`.
pub fn update_operator_norm<F>(mut hvp: F, lr: f64, dim: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let mut apply = |v: &ParamVector| -> Result<ParamVector> {
        let hv = hvp(v)?;
        v.add_scaled(-lr, &hv)
    };
    let mut v = init_perturbation(dim, 1.0, seed)?.delta_vector();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let mv = apply(&v)?;
        let mtmv = apply(&mv)?;
        // Rayleigh quotient of MᵀM at the unit vector v.
        estimate = v.dot(&mtmv).max(0.0).sqrt();
        let n = mtmv.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        v = mtmv.scaled(1.0 / n)?;
    }
    Ok(estimate)
}

/// One-dimensional maps with analytically known exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum Map1d {
    /// `x ↦ r·x·(1 − x)` on `[0, 1]`, `0 ≤ r ≤ 4`.
    Logistic(f64),
    /// `x ↦ μ·min(x, 1 − x)` on `[0, 1]`, `0 ≤ μ ≤ 2`.
    Tent(f64),
    /// `x ↦ a·x` on the real line.
    Linear(f64),
}

impl Map1d {
    pub fn parse(kind: &str, param: f64) -> Result<Self> {
        match kind {
            "logistic" => Ok(Map1d::Logistic(param)),
            "tent" => Ok(Map1d::Tent(param)),
            "linear" => Ok(Map1d::Linear(param)),
            other => Err(Error::invalid(format!(
                "unknown map `{other}` (expected logistic, tent or linear)"
            ))),
        }
    }

    fn validate(&self, x0: f64) -> Result<()> {
        let in_unit = (0.0..=1.0).contains(&x0);
        match *self {
            Map1d::Logistic(r) if !(0.0..=4.0).contains(&r) => {
                Err(Error::invalid(format!("logistic parameter {r} outside [0, 4]")))
            }
            Map1d::Tent(mu) if !(0.0..=2.0).contains(&mu) => {
                Err(Error::invalid(format!("tent parameter {mu} outside [0, 2]")))
            }
            Map1d::Logistic(_) | Map1d::Tent(_) if !in_unit => {
                Err(Error::invalid(format!("x0 = {x0} outside [0, 1]")))
            }
            Map1d::Linear(a) if !a.is_finite() || !x0.is_finite() => {
                Err(Error::invalid("linear map needs finite slope and start"))
            }
            _ => Ok(()),
        }
    }

    fn step(&self, x: f64) -> f64 {
        match *self {
            Map1d::Logistic(r) => r * x * (1.0 - x),
            Map1d::Tent(mu) => mu * x.min(1.0 - x),
            Map1d::Linear(a) => a * x,
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Map1d::Logistic(r) => r * (1.0 - 2.0 * x),
            Map1d::Tent(mu) => {
                if x < 0.5 {
                    mu
                } else {
                    -mu
                }
            }
            Map1d::Linear(a) => a,
        }
    }

    fn in_domain(&self, x: f64) -> bool {
        match self {
            Map1d::Logistic(_) | Map1d::Tent(_) => (0.0..=1.0).contains(&x),
            Map1d::Linear(_) => !x.is_nan(),
        }
    }
}

/// Orbit average `(1/n)·Σ ln|f'(x_t)|` over `n` steps from `x0`.
pub fn map_le(map: Map1d, x0: f64, n_steps: usize) -> Result<LeEstimate> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be positive"));
    }
    map.validate(x0)?;
    let mut x = x0;
    let mut sum = 0.0;
    for step in 0..n_steps {
        sum += map.derivative(x).abs().ln();
        x = map.step(x);
        if !map.in_domain(x) {
            return Err(Error::OrbitEscaped { step, x });
        }
    }
    if sum.is_nan() {
        return Err(Error::NonFinite("orbit log-derivative sum".into()));
    }
    Ok(LeEstimate {
        value: sum / n_steps as f64,
        steps: n_steps as u64,
        method: PropagationMethod::Tangent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_has_requested_norm() {
        let s = init_perturbation(4, 1e-6, 7).unwrap();
        assert_abs_diff_eq!(s.delta_norm(), 1e-6, epsilon = 1e-18);
        assert_eq!(s.log_stretch_sum(), 0.0);
        assert_eq!(s.steps(), 0);
        assert_eq!(s, init_perturbation(4, 1e-6, 7).unwrap());
        assert!(init_perturbation(0, 1e-6, 7).is_err());
        assert!(init_perturbation(4, 0.0, 7).is_err());
    }

    #[test]
    fn different_seeds_give_different_directions() {
        for seed in 0..50u64 {
            let a = init_perturbation(6, 1.0, seed).unwrap();
            let b = init_perturbation(6, 1.0, seed + 1000).unwrap();
            assert!(linalg::cosine(a.delta(), b.delta()).abs() < 0.999);
        }
    }

    #[test]
    fn diagonal_tangent_step() {
        let mut s = PerturbationState::from_delta(ParamVector::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let hv = ParamVector::new(vec![1.0, 0.0]).unwrap();
        propagate_tangent(&mut s, &hv, 0.1).unwrap();
        assert_abs_diff_eq!(s.delta()[0], 0.9, epsilon = 1e-15);
        assert_eq!(s.delta()[1], 0.0);
    }

    #[test]
    fn zero_hessian_is_identity() {
        let mut s = init_perturbation(3, 1e-6, 1).unwrap();
        let before = s.delta().to_vec();
        propagate_tangent(&mut s, &ParamVector::zeros(3), 0.5).unwrap();
        assert_eq!(s.delta(), &before[..]);
        assert_eq!(s.log_stretch_sum(), 0.0);
    }

    #[test]
    fn renormalize_noop_and_rescale() {
        let mut s = init_perturbation(3, 2.0, 5).unwrap();
        assert!(!renormalize(&mut s));
        let dir = s.delta().to_vec();
        for d in &mut s.delta {
            *d *= 1e4;
        }
        assert!(renormalize(&mut s));
        assert_abs_diff_eq!(s.delta_norm(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(linalg::cosine(s.delta(), &dir), 1.0, epsilon = 1e-12);
        assert_eq!(s.renorm_count(), 1);
    }

    #[test]
    fn le_estimate_requires_steps() {
        let s = init_perturbation(2, 1.0, 0).unwrap();
        assert!(le_estimate(&s, PropagationMethod::Tangent).is_err());
    }

    #[test]
    fn geometric_stretch() {
        let mut s = init_perturbation(2, 1.0, 0).unwrap();
        for _ in 0..20 {
            // H = 5·I at lr 0.1 halves δ.
            let hv = s.delta_vector().scaled(5.0).unwrap();
            propagate_tangent(&mut s, &hv, 0.1).unwrap();
        }
        let le = le_estimate(&s, PropagationMethod::Tangent).unwrap();
        assert_abs_diff_eq!(le.value, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn zero_gradient_two_trajectory() {
        let theta = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let mut s = init_perturbation(2, 1e-6, 3).unwrap();
        let pert = theta.add_scaled(1.0, &s.delta_vector()).unwrap();
        let before = s.delta().to_vec();
        let (t2, p2) =
            propagate_two_trajectory(&theta, &pert, |p| Ok(ParamVector::zeros(p.dim())), 0.1, &mut s).unwrap();
        assert_eq!(t2, theta);
        assert_eq!(p2, pert);
        assert_abs_diff_eq!(s.log_stretch_sum(), 0.0, epsilon = 1e-9);
        for (a, b) in s.delta().iter().zip(&before) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn merged_trajectories_report_neg_infinity() {
        // lr·a = 1 sends every point to zero in one step.
        let theta = ParamVector::new(vec![0.3]).unwrap();
        let mut s = init_perturbation(1, 1e-3, 0).unwrap();
        let pert = theta.add_scaled(1.0, &s.delta_vector()).unwrap();
        propagate_two_trajectory(&theta, &pert, |p| p.scaled(2.0), 0.5, &mut s).unwrap();
        assert!(s.merged());
        let le = le_estimate(&s, PropagationMethod::TwoTrajectory).unwrap();
        assert_eq!(le.value, f64::NEG_INFINITY);
    }

    #[test]
    fn bounds_scalar_and_degenerate() {
        let b = le_bounds(&[0.1], &[1.0], &[0.9]).unwrap();
        assert_abs_diff_eq!(b.lower, 0.9f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(b.upper, 0.9f64.ln(), epsilon = 1e-15);
        let b = le_bounds(&[0.5], &[2.0], &[1.0]).unwrap();
        assert_eq!(b.lower, f64::NEG_INFINITY);
        assert!(le_bounds(&[0.1, 0.1], &[1.0], &[0.9, 0.9]).is_err());
        assert!(le_bounds(&[], &[], &[]).is_err());
    }

    #[test]
    fn linear_and_tent_maps() {
        let le = map_le(Map1d::Linear(0.5), 3.0, 100).unwrap();
        assert_abs_diff_eq!(le.value, 0.5f64.ln(), epsilon = 1e-12);
        let le = map_le(Map1d::Linear(-3.0), 1.0, 5000).unwrap();
        assert_abs_diff_eq!(le.value, 3.0f64.ln(), epsilon = 1e-9);
        let le = map_le(Map1d::Tent(1.5), 0.3, 1000).unwrap();
        assert_abs_diff_eq!(le.value, 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn map_domain_errors() {
        assert!(map_le(Map1d::Logistic(4.5), 0.3, 10).is_err());
        assert!(map_le(Map1d::Logistic(3.0), 1.3, 10).is_err());
        assert!(map_le(Map1d::Linear(1.0), 0.0, 0).is_err());
        assert!(Map1d::parse("henon", 1.0).is_err());
    }
}
