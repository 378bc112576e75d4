//! Adversarial data augmentation over a small family of semantic transforms.
//!
//! For 2-D features a transform is `scale·R(rotation)·x + shift`; for other
//! dimensions it is `scale·x + shift` with a scalar shift. Both are then
//! followed by a contrast change about the per-sample mean and additive
//! seeded noise. The inner problem
//!
//! ```text
//! max_ω  mean_i [ ℓ(θ; τ(x_i; ω), y_i) − λ·‖φ(τ(x_i; ω)) − φ(x_i)‖² ]
//! ```
//!
//! (`φ` = penultimate activations) is solved by finite-difference gradient
//! ascent with backtracking, starting from the identity transform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::{self, Batch, ModelSpec, ParamVector};
use crate::domains::DomainDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeds;

pub const SCALE_RANGE: (f64, f64) = (0.1, 10.0);
pub const CONTRAST_RANGE: (f64, f64) = (0.1, 10.0);
pub const MAX_NOISE: f64 = 10.0;
/// Central-difference step in ω.
pub const OMEGA_FD_STEP: f64 = 1e-4;
/// Backtracking budget of the ascent.
pub const MAX_HALVINGS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    /// Radians; only meaningful for 2-D inputs.
    pub rotation: f64,
    pub scale: f64,
    /// Length 2 for 2-D inputs, otherwise a single broadcast offset.
    pub shift: Vec<f64>,
    pub noise_scale: f64,
    pub contrast: f64,
}

fn shift_len(dim: usize) -> usize {
    if dim == 2 {
        2
    } else {
        1
    }
}

impl TransformParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            shift: vec![0.0; shift_len(dim)],
            noise_scale: 0.0,
            contrast: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0
            && self.scale == 1.0
            && self.shift.iter().all(|&s| s == 0.0)
            && self.noise_scale == 0.0
            && self.contrast == 1.0
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !in_range(self.scale, SCALE_RANGE) {
            return Err(Error::invalid(format!("scale {} outside [0.1, 10]", self.scale)));
        }
        if !in_range(self.contrast, CONTRAST_RANGE) {
            return Err(Error::invalid(format!("contrast {} outside [0.1, 10]", self.contrast)));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise_scale) {
            return Err(Error::invalid(format!("noise scale {} outside [0, 10]", self.noise_scale)));
        }
        if self.shift.len() != shift_len(dim) {
            return Err(Error::DimensionMismatch {
                context: "transform shift",
                expected: shift_len(dim),
                actual: self.shift.len(),
            });
        }
        if dim != 2 && self.rotation != 0.0 {
            return Err(Error::invalid("rotation is only defined for 2-D inputs"));
        }
        if !self.rotation.is_finite() || self.shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("transform parameters".into()));
        }
        Ok(())
    }

    /// Free coordinates, in the order used by the ascent.
    pub fn to_vec(&self, dim: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(6);
        if dim == 2 {
            v.push(self.rotation);
        }
        v.push(self.scale);
        v.extend_from_slice(&self.shift);
        v.push(self.contrast);
        v.push(self.noise_scale);
        v
    }

    pub fn from_vec(dim: usize, v: &[f64]) -> Self {
        let mut it = v.iter().copied();
        let rotation = if dim == 2 { it.next().unwrap_or(0.0) } else { 0.0 };
        let scale = it.next().unwrap_or(1.0);
        let shift = (0..shift_len(dim)).map(|_| it.next().unwrap_or(0.0)).collect();
        let contrast = it.next().unwrap_or(1.0);
        let noise_scale = it.next().unwrap_or(0.0);
        Self {
            rotation,
            scale,
            shift,
            noise_scale,
            contrast,
        }
    }

    fn clamped(mut self) -> Self {
        self.scale = self.scale.clamp(SCALE_RANGE.0, SCALE_RANGE.1);
        self.contrast = self.contrast.clamp(CONTRAST_RANGE.0, CONTRAST_RANGE.1);
        self.noise_scale = self.noise_scale.clamp(0.0, MAX_NOISE);
        self
    }
}

/// Standard-normal draws used by the noise component, one per feature.
pub fn noise_draws(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn transform_into(x: &[f64], omega: &TransformParams, noise: &[f64], out: &mut [f64]) {
    let d = x.len();
    if d == 2 {
        let (s, c) = omega.rotation.sin_cos();
        out[0] = omega.scale * (c * x[0] - s * x[1]) + omega.shift[0];
        out[1] = omega.scale * (s * x[0] + c * x[1]) + omega.shift[1];
    } else {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = omega.scale * xi + omega.shift[0];
        }
    }
    if omega.contrast != 1.0 {
        let mean = out.iter().sum::<f64>() / d as f64;
        let k = omega.contrast - 1.0;
        for o in out.iter_mut() {
            *o += k * (*o - mean);
        }
    }
    if omega.noise_scale != 0.0 {
        for (o, n) in out.iter_mut().zip(noise) {
            *o += omega.noise_scale * n;
        }
    }
}

/// `τ(x; ω)`. The identity transform returns `x` exactly; `noise` holds the
/// per-feature draws scaled by `ω.noise_scale`.
pub fn apply_transform(x: &[f64], omega: &TransformParams, noise: &[f64]) -> Result<Vec<f64>> {
    omega.validate(x.len())?;
    if noise.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "transform noise",
            expected: x.len(),
            actual: noise.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transform input".into()));
    }
    let mut out = vec![0.0; x.len()];
    transform_into(x, omega, noise, &mut out);
    Ok(out)
}

fn transform_matrix(inputs: &Matrix, omega: &TransformParams, noise: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), inputs.cols());
    for i in 0..inputs.rows() {
        transform_into(inputs.row(i), omega, noise.row(i), out.row_mut(i));
    }
    out
}

/// `∂τ(x; ω)/∂ω` as a `d × |ω|` matrix, columns ordered as
/// [`TransformParams::to_vec`]. Rotation, scale and shift columns are
/// analytic (pushed through the linear contrast map); contrast and noise
/// columns are central differences.
pub fn transform_jacobian(x: &[f64], omega: &TransformParams, noise: &[f64]) -> Result<Matrix> {
    apply_transform(x, omega, noise)?;
    let d = x.len();
    let w = omega.to_vec(d);
    let mut jac = Matrix::zeros(d, w.len());
    // Contrast acts linearly on the affine output: v ↦ v + (c−1)(v − mean v).
    let contrast = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / d as f64;
        for e in v.iter_mut() {
            *e += (omega.contrast - 1.0) * (*e - mean);
        }
    };
    let mut col = 0;
    let put = |jac: &mut Matrix, mut v: Vec<f64>, col: usize| {
        contrast(&mut v);
        for (r, e) in v.into_iter().enumerate() {
            jac.set(r, col, e);
        }
    };
    if d == 2 {
        let (s, c) = omega.rotation.sin_cos();
        put(
            &mut jac,
            vec![omega.scale * (-s * x[0] - c * x[1]), omega.scale * (c * x[0] - s * x[1])],
            col,
        );
        col += 1;
        put(&mut jac, vec![c * x[0] - s * x[1], s * x[0] + c * x[1]], col);
        col += 1;
        put(&mut jac, vec![1.0, 0.0], col);
        col += 1;
        put(&mut jac, vec![0.0, 1.0], col);
        col += 1;
    } else {
        put(&mut jac, x.to_vec(), col);
        col += 1;
        put(&mut jac, vec![1.0; d], col);
        col += 1;
    }
    let h = OMEGA_FD_STEP;
    for c in col..w.len() {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus[c] += h;
        minus[c] -= h;
        let mut yp = vec![0.0; d];
        let mut ym = vec![0.0; d];
        transform_into(x, &TransformParams::from_vec(d, &plus), noise, &mut yp);
        transform_into(x, &TransformParams::from_vec(d, &minus), noise, &mut ym);
        for r in 0..d {
            jac.set(r, c, (yp[r] - ym[r]) / (2.0 * h));
        }
    }
    Ok(jac)
}

/// Squared Euclidean distance between the penultimate activations of `x`
/// and `x_t`.
pub fn feature_distance(spec: &ModelSpec, params: &ParamVector, x: &[f64], x_t: &[f64]) -> Result<f64> {
    let pair = Matrix::from_rows(&[x.to_vec(), x_t.to_vec()])?;
    let f = diffengine::features(spec, params, &pair)?;
    Ok(f.row(0).iter().zip(f.row(1)).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Weight of the feature-consistency penalty.
    pub lambda: f64,
    /// Gradient-ascent iterations per batch.
    pub ascent_steps: usize,
    pub ascent_lr: f64,
    pub samples_per_input: usize,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ascent_steps: 10,
            ascent_lr: 0.05,
            samples_per_input: 1,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.ascent_lr > 0.0 && self.ascent_lr.is_finite()) {
            return Err(Error::Config("ascent_lr must be positive".into()));
        }
        if self.samples_per_input == 0 {
            return Err(Error::Config("samples_per_input must be positive".into()));
        }
        Ok(())
    }
}

/// Result of the inner maximization on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub omega: TransformParams,
    pub batch: Batch,
    pub objective_identity: f64,
    pub objective_final: f64,
    /// Ascent iterations that were accepted.
    pub accepted_steps: usize,
    /// The objective went non-finite at some candidate and was reverted.
    pub flagged: bool,
}

/// Evaluates the inner objective for fixed `(θ, batch, noise)`.
pub struct InnerObjective<'a> {
    spec: &'a ModelSpec,
    params: &'a ParamVector,
    batch: &'a Batch,
    noise: Matrix,
    base_features: Matrix,
    lambda: f64,
}

impl<'a> InnerObjective<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector, batch: &'a Batch, lambda: f64, noise_seed: u64) -> Result<Self> {
        let n = batch.len();
        let d = batch.inputs().cols();
        let mut noise = Matrix::zeros(n, d);
        for i in 0..n {
            noise
                .row_mut(i)
                .copy_from_slice(&noise_draws(d, seeds::derive_indexed(noise_seed, i as u64)));
        }
        let base_features = diffengine::features(spec, params, batch.inputs())?;
        Ok(Self {
            spec,
            params,
            batch,
            noise,
            base_features,
            lambda,
        })
    }

    pub fn transformed(&self, omega: &TransformParams) -> Result<Batch> {
        self.batch.with_inputs(transform_matrix(self.batch.inputs(), omega, &self.noise))
    }

    /// Mean feature distance `d_θ(τ(x; ω), x)` over the batch.
    pub fn mean_feature_distance(&self, omega: &TransformParams) -> Result<f64> {
        let moved = transform_matrix(self.batch.inputs(), omega, &self.noise);
        let f = diffengine::features(self.spec, self.params, &moved)?;
        Ok(sq_dist_mean(&f, &self.base_features))
    }

    /// `J(ω)`; non-finite values surface as `Ok(NaN)` / `Ok(inf)` so the
    /// ascent can reject them.
    pub fn value(&self, omega: &TransformParams) -> f64 {
        let moved = transform_matrix(self.batch.inputs(), omega, &self.noise);
        if !moved.is_finite() {
            return f64::NAN;
        }
        let Ok(batch) = self.batch.with_inputs(moved) else {
            return f64::NAN;
        };
        let Ok(loss) = diffengine::loss(self.spec, self.params, &batch, 0.0) else {
            return f64::NAN;
        };
        let Ok(f) = diffengine::features(self.spec, self.params, batch.inputs()) else {
            return f64::NAN;
        };
        loss - self.lambda * sq_dist_mean(&f, &self.base_features)
    }

    fn gradient(&self, omega: &TransformParams) -> Vec<f64> {
        let d = self.batch.inputs().cols();
        let w = omega.to_vec(d);
        (0..w.len())
            .map(|c| {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus[c] += OMEGA_FD_STEP;
                minus[c] -= OMEGA_FD_STEP;
                let jp = self.value(&TransformParams::from_vec(d, &plus));
                let jm = self.value(&TransformParams::from_vec(d, &minus));
                (jp - jm) / (2.0 * OMEGA_FD_STEP)
            })
            .collect()
    }
}

fn sq_dist_mean(a: &Matrix, b: &Matrix) -> f64 {
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    total / a.rows() as f64
}

/// Gradient ascent on `J(ω)` from the identity transform.
///
/// A candidate step is accepted only if it does not lower `J`; otherwise the
/// step size is halved. After [`MAX_HALVINGS`] halvings the ascent stops.
pub fn adversarial_maximize(spec: &ModelSpec, params: &ParamVector, batch: &Batch, cfg: &AugConfig) -> Result<AugmentedBatch> {
    cfg.validate()?;
    let d = batch.inputs().cols();
    let identity = TransformParams::identity(d);
    if cfg.ascent_steps == 0 {
        return Ok(AugmentedBatch {
            omega: identity,
            batch: batch.clone(),
            objective_identity: f64::NAN,
            objective_final: f64::NAN,
            accepted_steps: 0,
            flagged: false,
        });
    }
    let objective = InnerObjective::new(spec, params, batch, cfg.lambda, cfg.seed)?;
    let j0 = objective.value(&identity);
    if !j0.is_finite() {
        return Err(Error::NonFinite("adversarial objective at the identity transform".into()));
    }

    let mut omega = identity;
    let mut j = j0;
    let mut step = cfg.ascent_lr;
    let mut halvings = 0;
    let mut accepted = 0;
    let mut flagged = false;
    'ascent: for _ in 0..cfg.ascent_steps {
        let g = objective.gradient(&omega);
        if g.iter().any(|v| !v.is_finite()) {
            flagged = true;
            break;
        }
        let w = omega.to_vec(d);
        loop {
            let cand: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi + step * gi).collect();
            let cand = TransformParams::from_vec(d, &cand).clamped();
            let jc = objective.value(&cand);
            if !jc.is_finite() {
                flagged = true;
            } else if jc >= j {
                omega = cand;
                j = jc;
                accepted += 1;
                break;
            }
            if halvings == MAX_HALVINGS {
                break 'ascent;
            }
            step *= 0.5;
            halvings += 1;
        }
    }
    let batch = objective.transformed(&omega)?;
    Ok(AugmentedBatch {
        omega,
        batch,
        objective_identity: j0,
        objective_final: j,
        accepted_steps: accepted,
        flagged,
    })
}

/// Appends `samples_per_input` adversarial copies of every sample. Batches
/// are contiguous chunks of `batch_size` rows, each maximized with its own
/// seed; the result is tagged `<domain>_aug`.
pub fn augment_dataset(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DomainDataset,
    cfg: &AugConfig,
    batch_size: usize,
) -> Result<DomainDataset> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let n = data.len();
    let chunks: Vec<(usize, usize)> = (0..cfg.samples_per_input)
        .flat_map(|copy| (0..n.div_ceil(batch_size)).map(move |b| (copy, b)))
        .collect();
    let pieces: Vec<Result<Matrix>> = chunks
        .par_iter()
        .map(|&(copy, b)| {
            let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
            let batch = data.batch(&idx)?;
            let seed = seeds::derive_indexed(seeds::derive_indexed(cfg.seed, copy as u64), b as u64);
            let local = AugConfig {
                seed,
                ..cfg.clone()
            };
            let out = adversarial_maximize(spec, params, &batch, &local)?;
            if out.flagged {
                log::warn!("adversarial objective went non-finite on batch {b} (copy {copy}); reverted");
            }
            Ok(out.batch.inputs().clone())
        })
        .collect();
    let mut features = data.features().clone();
    let mut labels = data.labels().to_vec();
    for (piece, &(_, b)) in pieces.into_iter().zip(&chunks) {
        features = features.vstack(&piece?)?;
        labels.extend_from_slice(&data.labels()[b * batch_size..((b + 1) * batch_size).min(n)]);
    }
    DomainDataset::new(
        features,
        labels,
        Some(data.num_classes()),
        format!("{}_aug", data.domain()),
        data.seed(),
    )
}
