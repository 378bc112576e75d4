//! LE-aware SGD and the baseline optimizers it is compared against.
//!
//! All step functions take the gradient the caller computed. For every
//! optimizer except AdamW the weight decay is coupled, i.e. already inside
//! the gradient (`diffengine::grad` with `γ > 0`); AdamW receives the data
//! gradient and applies its decay to the parameters directly. Use
//! [`Optimizer::coupled_weight_decay`] to pick the `γ` for the gradient.

use serde::{Deserialize, Serialize};

use crate::diffengine::ParamVector;
use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LR_FLOOR: f64 = 1e-7;

/// `η·exp(−β·ΔLE)` when `ΔLE > 0`, otherwise `η` unchanged; never below
/// `lr_floor`.
pub fn adjust_lr(lr: f64, delta_le: f64, beta: f64, lr_floor: f64) -> Result<f64> {
    if !delta_le.is_finite() {
        return Err(Error::NonFinite(format!("LE difference ({delta_le})")));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if delta_le > 0.0 {
        Ok((lr * (-beta * delta_le).exp()).max(lr_floor))
    } else {
        Ok(lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeAwareConfig {
    pub lr0: f64,
    pub beta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Perturbation magnitude relative to `‖θ_0‖`.
    pub delta_mag: f64,
    /// Iterations per ΔLE evaluation.
    pub le_window: usize,
    pub lr_floor: f64,
}

impl Default for LeAwareConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            beta: DEFAULT_BETA,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 5e-3,
            delta_mag: crate::lyapunov::DEFAULT_RELATIVE_MAGNITUDE,
            le_window: 1,
            lr_floor: DEFAULT_LR_FLOOR,
        }
    }
}

impl LeAwareConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_floor && self.lr_floor >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "need lr0 > lr_floor >= 0 (lr0 = {}, lr_floor = {})",
                self.lr0, self.lr_floor
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        check_momentum(self.momentum)?;
        check_non_negative("weight_decay", self.weight_decay)?;
        if !(self.delta_mag > 0.0) {
            return Err(Error::Config("delta_mag must be positive".into()));
        }
        if self.le_window == 0 {
            return Err(Error::Config("le_window must be positive".into()));
        }
        Ok(())
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
    }
    Ok(())
}

fn check_non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeAwareState {
    pub lr: f64,
    pub velocity: Vec<f64>,
    pub prev_le: Option<f64>,
    pub step: u64,
    /// `(step, lr)` each time the learning rate changed.
    pub lr_history: Vec<(u64, f64)>,
    /// Number of updates where `lr_floor` clipped the rule.
    pub floor_hits: u64,
}

impl LeAwareState {
    pub fn new(cfg: &LeAwareConfig, dim: usize) -> Self {
        Self {
            lr: cfg.lr0,
            velocity: vec![0.0; dim],
            prev_le: None,
            step: 0,
            lr_history: Vec::new(),
            floor_hits: 0,
        }
    }
}

/// `v ← μ·v + g; θ ← θ − η·v`. Shared by SGD and LE-aware SGD so the two
/// agree bit for bit when the learning rate never moves.
fn momentum_update(velocity: &mut [f64], params: &ParamVector, grad: &ParamVector, momentum: f64, lr: f64) -> Vec<f64> {
    let mut next = params.as_slice().to_vec();
    for ((v, g), p) in velocity.iter_mut().zip(grad.as_slice()).zip(next.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    next
}

fn check_step_dims(params: &ParamVector, grad: &ParamVector, state_dim: usize) -> Result<()> {
    if params.dim() != grad.dim() || params.dim() != state_dim {
        return Err(Error::DimensionMismatch {
            context: "optimizer step",
            expected: state_dim,
            actual: grad.dim(),
        });
    }
    Ok(())
}

fn finish(next: Vec<f64>, step: u64, lr: f64) -> Result<ParamVector> {
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizerDiverged { step, lr });
    }
    Ok(ParamVector::from_vec_unchecked(next))
}

/// Momentum step with the current learning rate, then the LE feedback:
/// when `le_now` is given and a previous reading exists, the learning rate
/// for the next step is `adjust_lr(lr, le_now − prev_le, β, floor)`.
///
/// The state is left untouched if the update fails.
pub fn leaware_step(
    state: &mut LeAwareState,
    grad: &ParamVector,
    params: &ParamVector,
    le_now: Option<f64>,
    cfg: &LeAwareConfig,
) -> Result<ParamVector> {
    check_step_dims(params, grad, state.velocity.len())?;
    let mut velocity = state.velocity.clone();
    let next = momentum_update(&mut velocity, params, grad, cfg.momentum, state.lr);
    let next = finish(next, state.step, state.lr)?;

    let mut lr = state.lr;
    if let Some(le) = le_now {
        if let Some(prev) = state.prev_le {
            lr = adjust_lr(state.lr, le - prev, cfg.beta, cfg.lr_floor)?;
            let unclipped = state.lr * (-cfg.beta * (le - prev)).exp();
            if le - prev > 0.0 && unclipped < cfg.lr_floor {
                state.floor_hits += 1;
                log::debug!("lr floor {} binds at step {}", cfg.lr_floor, state.step);
            }
        }
        state.prev_le = Some(le);
    }
    state.velocity = velocity;
    state.step += 1;
    if lr != state.lr {
        state.lr = lr;
        state.lr_history.push((state.step, lr));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl SgdState {
    pub fn new(dim: usize) -> Self {
        Self {
            velocity: vec![0.0; dim],
            step: 0,
        }
    }
}

pub fn sgd_step(state: &mut SgdState, grad: &ParamVector, params: &ParamVector, cfg: &SgdConfig) -> Result<ParamVector> {
    check_step_dims(params, grad, state.velocity.len())?;
    let mut velocity = state.velocity.clone();
    let next = finish(
        momentum_update(&mut velocity, params, grad, cfg.momentum, cfg.lr),
        state.step,
        cfg.lr,
    )?;
    state.velocity = velocity;
    state.step += 1;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay; only AdamW reads it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

fn adam_like(
    state: &mut AdamState,
    grad: &ParamVector,
    params: &ParamVector,
    cfg: &AdamConfig,
    decoupled_decay: f64,
) -> Result<ParamVector> {
    check_step_dims(params, grad, state.m.len())?;
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = params.as_slice().to_vec();
    for i in 0..next.len() {
        let g = grad.as_slice()[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        next[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decoupled_decay * next[i]);
    }
    let next = finish(next, state.step, cfg.lr)?;
    state.m = m;
    state.v = v;
    state.step = t;
    Ok(next)
}

/// Adam with bias correction; weight decay must already be in `grad`.
pub fn adam_step(state: &mut AdamState, grad: &ParamVector, params: &ParamVector, cfg: &AdamConfig) -> Result<ParamVector> {
    adam_like(state, grad, params, cfg, 0.0)
}

/// Adam with decoupled weight decay `θ ← θ − η·(m̂/(√v̂+ε) + wd·θ)`.
pub fn adamw_step(state: &mut AdamState, grad: &ParamVector, params: &ParamVector, cfg: &AdamConfig) -> Result<ParamVector> {
    adam_like(state, grad, params, cfg, cfg.weight_decay)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub sq: Vec<f64>,
    pub step: u64,
}

impl RmsPropState {
    pub fn new(dim: usize) -> Self {
        Self {
            sq: vec![0.0; dim],
            step: 0,
        }
    }
}

pub fn rmsprop_step(
    state: &mut RmsPropState,
    grad: &ParamVector,
    params: &ParamVector,
    cfg: &RmsPropConfig,
) -> Result<ParamVector> {
    check_step_dims(params, grad, state.sq.len())?;
    let mut sq = state.sq.clone();
    let mut next = params.as_slice().to_vec();
    for i in 0..next.len() {
        let g = grad.as_slice()[i];
        sq[i] = cfg.rho * sq[i] + (1.0 - cfg.rho) * g * g;
        next[i] -= cfg.lr * g / (sq[i].sqrt() + cfg.eps);
    }
    let next = finish(next, state.step, cfg.lr)?;
    state.sq = sq;
    state.step += 1;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Leaware,
    Sgd,
    Adam,
    Adamw,
    Rmsprop,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Leaware,
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Adamw,
        OptimizerKind::Rmsprop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Leaware => "leaware",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters shared by every optimizer in a comparison; each kind
/// reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub delta_mag: f64,
    /// Iterations per ΔLE evaluation; `None` means one epoch.
    pub le_window: Option<usize>,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eps: f64,
    pub rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Leaware,
            lr: 0.05,
            momentum: DEFAULT_MOMENTUM,
            // Tuned on the two-moons suite; the image benchmarks use 1e-5..5e-4.
            weight_decay: 5e-3,
            beta: DEFAULT_BETA,
            delta_mag: crate::lyapunov::DEFAULT_RELATIVE_MAGNITUDE,
            le_window: None,
            lr_floor: DEFAULT_LR_FLOOR,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            eps: 1e-8,
            rho: 0.99,
        }
    }
}

impl OptimizerConfig {
    pub fn leaware_config(&self, window: usize) -> LeAwareConfig {
        LeAwareConfig {
            lr0: self.lr,
            beta: self.beta,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            delta_mag: self.delta_mag,
            le_window: self.le_window.unwrap_or(window),
            lr_floor: self.lr_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        check_momentum(self.momentum)?;
        check_non_negative("weight_decay", self.weight_decay)?;
        if self.le_window == Some(0) {
            return Err(Error::Config("le_window must be positive".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.kind == OptimizerKind::Leaware {
            self.leaware_config(1).validate()?;
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Inner {
    Leaware(LeAwareConfig, LeAwareState),
    Sgd(SgdConfig, SgdState),
    Adam(AdamConfig, AdamState),
    Adamw(AdamConfig, AdamState),
    Rmsprop(RmsPropConfig, RmsPropState),
}

/// Any of the five optimizers behind one stepping interface.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    inner: Inner,
}

impl Optimizer {
    /// `le_window` is the resolved window length in iterations.
    pub fn new(cfg: &OptimizerConfig, dim: usize, le_window: usize) -> Result<Self> {
        cfg.validate()?;
        let inner = match cfg.kind {
            OptimizerKind::Leaware => {
                let c = cfg.leaware_config(le_window);
                c.validate()?;
                let s = LeAwareState::new(&c, dim);
                Inner::Leaware(c, s)
            }
            OptimizerKind::Sgd => Inner::Sgd(
                SgdConfig {
                    lr: cfg.lr,
                    momentum: cfg.momentum,
                },
                SgdState::new(dim),
            ),
            OptimizerKind::Adam => Inner::Adam(cfg.adam(), AdamState::new(dim)),
            OptimizerKind::Adamw => Inner::Adamw(cfg.adam(), AdamState::new(dim)),
            OptimizerKind::Rmsprop => Inner::Rmsprop(
                RmsPropConfig {
                    lr: cfg.lr,
                    rho: cfg.rho,
                    eps: cfg.eps,
                },
                RmsPropState::new(dim),
            ),
        };
        Ok(Self {
            kind: cfg.kind,
            weight_decay: cfg.weight_decay,
            inner,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// The `γ` to fold into the gradient before calling [`Optimizer::step`].
    pub fn coupled_weight_decay(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adamw => 0.0,
            _ => self.weight_decay,
        }
    }

    /// Current (base) learning rate.
    pub fn lr(&self) -> f64 {
        match &self.inner {
            Inner::Leaware(_, s) => s.lr,
            Inner::Sgd(c, _) => c.lr,
            Inner::Adam(c, _) | Inner::Adamw(c, _) => c.lr,
            Inner::Rmsprop(c, _) => c.lr,
        }
    }

    pub fn lr_history(&self) -> &[(u64, f64)] {
        match &self.inner {
            Inner::Leaware(_, s) => &s.lr_history,
            _ => &[],
        }
    }

    pub fn floor_hits(&self) -> u64 {
        match &self.inner {
            Inner::Leaware(_, s) => s.floor_hits,
            _ => 0,
        }
    }

    /// `le_now` is only read by the LE-aware optimizer.
    pub fn step(&mut self, grad: &ParamVector, params: &ParamVector, le_now: Option<f64>) -> Result<ParamVector> {
        match &mut self.inner {
            Inner::Leaware(c, s) => leaware_step(s, grad, params, le_now, c),
            Inner::Sgd(c, s) => sgd_step(s, grad, params, c),
            Inner::Adam(c, s) => adam_step(s, grad, params, c),
            Inner::Adamw(c, s) => adamw_step(s, grad, params, c),
            Inner::Rmsprop(c, s) => rmsprop_step(s, grad, params, c),
        }
    }
}
