//! Training loop with Lyapunov tracking, target-domain evaluation,
//! optimizer comparisons and metrics output.
//!
//! One iteration on a minibatch:
//!
//! 1. loss and gradient at `θ_t`;
//! 2. the perturbation is pushed through the local gradient-descent map
//!    `θ ↦ θ − η_t·∇L(θ)` on the same minibatch (full loss, including the
//!    weight decay), which records `ln(‖δ_{t+1}‖/‖δ_t‖)`;
//! 3. once per LE window the windowed exponent is handed to the optimizer;
//! 4. the optimizer moves `θ_t → θ_{t+1}`.
//!
//! With augmentation enabled, every epoch starts by regenerating the
//! adversarial copies on the current parameters.

mod comparison;
mod config;
mod metrics;

pub use comparison::{run_comparison, ComparisonCell, ComparisonRow, ComparisonTable};
pub use config::{DomainData, DomainSuite, ExperimentConfig, LyapunovConfig, SourceSpec, TargetSpec};
pub use metrics::{emit_iterations, emit_metrics, emit_plot_data, read_metrics, write_params};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment;
use crate::diffengine::{self, ModelSpec, ParamVector};
use crate::domains::DomainDataset;
use crate::error::{Error, Result};
use crate::lyapunov::{self, PropagationMethod};
use crate::optimizers::Optimizer;
use crate::seeds::{self, SeedStreams};

/// A run is aborted once a minibatch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Fraction of the LE trace (by epochs) summarized as its tail.
pub const TAIL_FRACTION: f64 = 0.25;

/// One row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iteration: u64,
    /// Mean minibatch loss over the epoch (including weight decay).
    pub train_loss: f64,
    /// Learning rate in force at the end of the epoch.
    pub lr: f64,
    /// Exponent over the latest completed LE window.
    pub le: f64,
    /// `le` minus the previous window's exponent (0 for the first window).
    pub delta_le: f64,
    pub renorm_count: u64,
    /// `(target tag, accuracy)` in configuration order.
    pub accuracies: Vec<(String, f64)>,
}

impl MetricsRow {
    pub fn mean_accuracy(&self) -> f64 {
        if self.accuracies.is_empty() {
            return f64::NAN;
        }
        self.accuracies.iter().map(|(_, a)| a).sum::<f64>() / self.accuracies.len() as f64
    }
}

/// Per-iteration trace, recorded when `verbose` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub epoch: usize,
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub stretch: f64,
    pub le: f64,
    pub delta_le: f64,
    pub renorm_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, iteration: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub params: ParamVector,
    pub metrics: Vec<MetricsRow>,
    pub iterations: Vec<IterationRow>,
    pub status: RunStatus,
    pub target_tags: Vec<String>,
    /// `(iteration, lr)` at every learning-rate change.
    pub lr_history: Vec<(u64, f64)>,
    pub source_class_counts: Vec<usize>,
    /// Times the perturbed and nominal trajectories merged (δ reseeded).
    pub merged_events: u64,
    pub floor_hits: u64,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_accuracies(&self) -> Option<&[(String, f64)]> {
        self.metrics.last().map(|r| r.accuracies.as_slice())
    }

    pub fn le_series(&self) -> Vec<f64> {
        self.metrics.iter().map(|r| r.le).collect()
    }

    /// Mean of `le` over the last quarter of the epochs (at least one).
    pub fn tail_mean_le(&self) -> f64 {
        let les = self.le_series();
        if les.is_empty() {
            return f64::NAN;
        }
        let k = ((les.len() as f64 * TAIL_FRACTION).ceil() as usize).max(1);
        les[les.len() - k..].iter().sum::<f64>() / k as f64
    }
}

/// Argmax accuracy; ties go to the lower class index.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let out = diffengine::predict(spec, params, data.features())?;
    let correct = (0..data.len())
        .filter(|&i| argmax(out.row(i)) == data.labels()[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Generates the configured domains and trains on them.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = cfg.domains.build(cfg.seed, cfg.data_fraction)?;
    train(cfg, &data)
}

/// Tracks the exponent over fixed-length windows of iterations.
#[derive(Debug, Clone)]
struct LeWindow {
    len: usize,
    stretch: f64,
    steps: usize,
    last: Option<f64>,
    last_delta: f64,
}

impl LeWindow {
    fn new(len: usize) -> Self {
        Self {
            len,
            stretch: 0.0,
            steps: 0,
            last: None,
            last_delta: 0.0,
        }
    }

    /// Adds one step; returns the window exponent when the window closes.
    fn push(&mut self, stretch: f64) -> Option<f64> {
        self.stretch += stretch;
        self.steps += 1;
        if self.steps < self.len {
            return None;
        }
        let le = self.stretch / self.steps as f64;
        self.last_delta = self.last.map_or(0.0, |prev| le - prev);
        self.last = Some(le);
        self.stretch = 0.0;
        self.steps = 0;
        Some(le)
    }

    /// Latest closed window, or the open one before any has closed.
    fn current(&self) -> f64 {
        match self.last {
            Some(le) => le,
            None if self.steps > 0 => self.stretch / self.steps as f64,
            None => 0.0,
        }
    }
}

/// Trains on an explicit source/target split.
pub fn train(cfg: &ExperimentConfig, data: &DomainData) -> Result<RunResult> {
    cfg.validate()?;
    let spec = &cfg.model;
    let source = &data.source;
    if source.dim() != spec.input_dim() {
        return Err(Error::Config(format!(
            "model expects {} input features, source has {}",
            spec.input_dim(),
            source.dim()
        )));
    }
    if source.num_classes() > spec.output_dim() {
        return Err(Error::Config(format!(
            "source has {} classes but the model only {} outputs",
            source.num_classes(),
            spec.output_dim()
        )));
    }
    if cfg.batch_size > source.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} source samples",
            cfg.batch_size,
            source.len()
        )));
    }

    let streams = SeedStreams::new(cfg.seed);
    let copies = cfg.aug.as_ref().map_or(0, |a| a.samples_per_input);
    let train_len = source.len() * (1 + copies);
    let iters_per_epoch = train_len.div_ceil(cfg.batch_size);
    let window = cfg.optimizer.le_window.unwrap_or(iters_per_epoch);

    let mut params = spec.init_params(streams.init);
    let dim = params.dim();
    let mut opt = Optimizer::new(&cfg.optimizer, dim, window)?;
    let full_decay = cfg.optimizer.weight_decay;
    let magnitude = match params.norm() {
        n if n > 0.0 => cfg.optimizer.delta_mag * n,
        _ => cfg.optimizer.delta_mag,
    };
    let mut pert = lyapunov::init_perturbation(dim, magnitude, streams.perturbation)?;
    let mut renorms_before = 0u64;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(streams.batching);
    let mut le_window = LeWindow::new(window);

    let mut result = RunResult {
        params: params.clone(),
        metrics: Vec::with_capacity(cfg.epochs),
        iterations: Vec::new(),
        status: RunStatus::Completed,
        target_tags: data.targets.iter().map(|t| t.domain().to_string()).collect(),
        lr_history: Vec::new(),
        source_class_counts: source.class_counts(),
        merged_events: 0,
        floor_hits: 0,
    };
    let mut iteration = 0u64;

    'epochs: for epoch in 0..cfg.epochs {
        if cfg.lyapunov.reset_per_epoch && epoch > 0 {
            renorms_before += pert.renorm_count();
            pert = lyapunov::init_perturbation(dim, magnitude, seeds::derive_indexed(streams.perturbation, epoch as u64))?;
        }
        let train_set = match &cfg.aug {
            Some(aug) => {
                let aug = augment::AugConfig {
                    seed: seeds::derive_indexed(streams.augmentation, epoch as u64),
                    ..aug.clone()
                };
                match augment::augment_dataset(spec, &params, source, &aug, cfg.batch_size) {
                    Ok(d) => d,
                    Err(e) => {
                        result.status = RunStatus::Diverged {
                            epoch,
                            iteration,
                            reason: format!("augmentation failed: {e}"),
                        };
                        break 'epochs;
                    }
                }
            }
            None => source.clone(),
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut batch_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let step = (|| -> Result<(f64, f64, Option<f64>, ParamVector)> {
                let (loss, g) = diffengine::loss_and_grad(spec, &params, &batch, opt.coupled_weight_decay())?;
                if !(loss <= DIVERGENCE_LOSS) {
                    return Err(Error::NonFinite(format!("loss {loss:e} exceeds divergence threshold")));
                }
                let lr = opt.lr();
                match cfg.lyapunov.method {
                    PropagationMethod::TwoTrajectory => {
                        let pert_params = params.add_scaled(1.0, &pert.delta_vector())?;
                        lyapunov::propagate_two_trajectory(
                            &params,
                            &pert_params,
                            |p| diffengine::grad(spec, p, &batch, full_decay),
                            lr,
                            &mut pert,
                        )?;
                    }
                    PropagationMethod::Tangent => {
                        let hv = diffengine::hvp(spec, &params, &batch, &pert.delta_vector(), full_decay, cfg.lyapunov.fd_step)?;
                        lyapunov::propagate_tangent(&mut pert, &hv, lr)?;
                    }
                }
                let stretch = pert.last_stretch();
                let le_now = if pert.merged() {
                    None
                } else {
                    le_window.push(stretch)
                };
                let next = opt.step(&g, &params, le_now)?;
                Ok((loss, stretch, le_now, next))
            })();
            let (loss, stretch, _, next) = match step {
                Ok(v) => v,
                Err(e) => {
                    result.status = RunStatus::Diverged {
                        epoch,
                        iteration,
                        reason: e.to_string(),
                    };
                    break 'epochs;
                }
            };
            if pert.merged() {
                result.merged_events += 1;
                renorms_before += pert.renorm_count();
                pert = lyapunov::init_perturbation(
                    dim,
                    magnitude,
                    seeds::derive_indexed(streams.perturbation, u64::MAX - result.merged_events),
                )?;
            }
            params = next;
            iteration += 1;
            loss_sum += loss;
            batches += 1;
            if cfg.verbose {
                result.iterations.push(IterationRow {
                    epoch,
                    iteration,
                    loss,
                    lr: opt.lr(),
                    stretch,
                    le: le_window.current(),
                    delta_le: le_window.last_delta,
                    renorm_count: renorms_before + pert.renorm_count(),
                });
            }
        }

        let accuracies = data
            .targets
            .iter()
            .map(|t| Ok((t.domain().to_string(), evaluate(spec, &params, t)?)))
            .collect::<Result<Vec<_>>>()?;
        result.metrics.push(MetricsRow {
            epoch,
            iteration,
            train_loss: loss_sum / batches.max(1) as f64,
            lr: opt.lr(),
            le: le_window.current(),
            delta_le: le_window.last_delta,
            renorm_count: renorms_before + pert.renorm_count(),
            accuracies,
        });
    }

    result.params = params;
    result.lr_history = opt.lr_history().to_vec();
    result.floor_hits = opt.floor_hits();
    if let RunStatus::Diverged { epoch, iteration, reason } = &result.status {
        log::warn!("run diverged at epoch {epoch}, iteration {iteration}: {reason}");
    }
    Ok(result)
}
