//! Multilayer perceptrons over flat parameter vectors.
//!
//! The network is `input → (affine → activation)* → affine`, with the last
//! affine map producing logits (softmax cross-entropy) or regression outputs
//! (mean squared error). Parameters live in one contiguous [`ParamVector`];
//! layer `l` occupies `fan_out·fan_in` row-major weights followed by
//! `fan_out` biases, and layers are packed in order.
//!
//! Gradients are exact reverse-mode. Hessian-vector products are central
//! differences of the data gradient along `v`, with the weight-decay
//! contribution `γ·v` added analytically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Default central-difference step for [`hvp`], measured along the unit
/// direction of `v`.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Flat vector of model parameters; the state of the training map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Rejects empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("parameter vector must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter vector entry {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.0)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        linalg::dot(&self.0, &other.0)
    }

    /// `self + alpha·other`, rejected if the result is not finite.
    pub fn add_scaled(&self, alpha: f64, other: &ParamVector) -> Result<Self> {
        check_dims("add_scaled", self.dim(), other.dim())?;
        let mut out = self.0.clone();
        linalg::axpy(alpha, &other.0, &mut out);
        Self::new(out)
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * alpha).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    output: OutputKind,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, output: OutputKind) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "a model needs at least an input and an output layer",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(Self {
            layer_sizes,
            activation,
            output,
        })
    }

    /// Re-checks invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.layer_sizes.clone(), self.activation, self.output).map(|_| ())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Σ (fan_in + 1)·fan_out over the affine layers.
    pub fn parameter_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let slot = LayerSlot {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = slot.end();
                slot
            })
            .collect()
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.parameter_count()];
        for slot in self.layout() {
            let limit = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut values[slot.weight_offset..slot.bias_offset] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ParamVector::from_vec_unchecked(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_dims("parameter vector", self.parameter_count(), params.dim())
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        check_dims("input features", self.input_dim(), inputs.cols())?;
        if inputs.rows() == 0 {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("batch inputs".into()));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        self.check_inputs(&batch.inputs)?;
        match &batch.targets {
            Targets::Classes(labels) => {
                let k = self.output_dim();
                if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
                    return Err(Error::invalid(format!(
                        "class index {bad} out of range for {k} outputs"
                    )));
                }
            }
            Targets::Values(t) => check_dims("regression targets", self.output_dim(), t.cols())?,
        }
        Ok(())
    }
}

fn check_dims(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

/// Inputs (n×d) with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    targets: Targets,
}

impl Batch {
    pub fn classification(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_dims("batch labels", inputs.rows(), labels.len())?;
        Self::checked(inputs, Targets::Classes(labels))
    }

    pub fn regression(inputs: Matrix, targets: Matrix) -> Result<Self> {
        check_dims("batch targets", inputs.rows(), targets.rows())?;
        if !targets.is_finite() {
            return Err(Error::NonFinite("regression targets".into()));
        }
        Self::checked(inputs, Targets::Values(targets))
    }

    fn checked(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("batch inputs".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn with_inputs(&self, inputs: Matrix) -> Result<Self> {
        check_dims("replacement inputs", self.inputs.rows(), inputs.rows())?;
        Self::checked(inputs, self.targets.clone())
    }
}

/// Post-activation values of every layer; `[0]` is the input and the last
/// entry holds the (linear) output layer.
fn forward_trace(spec: &ModelSpec, params: &[f64], inputs: &Matrix) -> Vec<Matrix> {
    let layout = spec.layout();
    let n = inputs.rows();
    let mut trace = Vec::with_capacity(layout.len() + 1);
    trace.push(inputs.clone());
    for (l, slot) in layout.iter().enumerate() {
        let prev = &trace[l];
        let weights = &params[slot.weight_offset..slot.bias_offset];
        let bias = &params[slot.bias_offset..slot.end()];
        let hidden = l + 1 < layout.len();
        let mut out = Matrix::zeros(n, slot.fan_out);
        for i in 0..n {
            let x = prev.row(i);
            let row = out.row_mut(i);
            for (o, z) in row.iter_mut().enumerate() {
                let w = &weights[o * slot.fan_in..(o + 1) * slot.fan_in];
                let pre = linalg::dot(w, x) + bias[o];
                *z = if hidden { spec.activation.apply(pre) } else { pre };
            }
        }
        trace.push(out);
    }
    trace
}

/// Mean data loss and its derivative with respect to the output layer.
fn output_loss(spec: &ModelSpec, out: &Matrix, targets: &Targets) -> (f64, Matrix) {
    let n = out.rows();
    let scale = 1.0 / n as f64;
    let mut d_out = Matrix::zeros(n, out.cols());
    let mut total = 0.0;
    match (spec.output, targets) {
        (OutputKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            for i in 0..n {
                let z = out.row(i);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - z[labels[i]];
                let d = d_out.row_mut(i);
                for (k, dk) in d.iter_mut().enumerate() {
                    let p = (z[k] - lse).exp();
                    let y = if k == labels[i] { 1.0 } else { 0.0 };
                    *dk = (p - y) * scale;
                }
            }
        }
        (OutputKind::SoftmaxCrossEntropy, Targets::Values(t)) => {
            // Soft targets: −Σ t_k log p_k.
            for i in 0..n {
                let z = out.row(i);
                let ti = t.row(i);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                let tsum: f64 = ti.iter().sum();
                total += ti.iter().zip(z).map(|(tk, zk)| tk * (lse - zk)).sum::<f64>();
                let d = d_out.row_mut(i);
                for (k, dk) in d.iter_mut().enumerate() {
                    let p = (z[k] - lse).exp();
                    *dk = (tsum * p - ti[k]) * scale;
                }
            }
        }
        (OutputKind::MeanSquaredError, _) => {
            let k = out.cols();
            for i in 0..n {
                let z = out.row(i);
                let d = d_out.row_mut(i);
                for c in 0..k {
                    let target = match targets {
                        Targets::Classes(labels) => {
                            if labels[i] == c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Targets::Values(t) => t.get(i, c),
                    };
                    let r = z[c] - target;
                    total += 0.5 * r * r;
                    d[c] = r * scale;
                }
            }
        }
    }
    (total * scale, d_out)
}

fn regularizer(params: &[f64], weight_decay: f64) -> f64 {
    0.5 * weight_decay * linalg::dot(params, params)
}

fn check_weight_decay(weight_decay: f64) -> Result<()> {
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::invalid(format!(
            "weight decay must be a finite non-negative number, got {weight_decay}"
        )));
    }
    Ok(())
}

/// Output layer values (logits or regression outputs), one row per sample.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Matrix> {
    predict(spec, params, batch.inputs())
}

/// [`forward`] on bare inputs.
pub fn predict(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    spec.check_params(params)?;
    spec.check_inputs(inputs)?;
    let out = forward_trace(spec, params.as_slice(), inputs)
        .pop()
        .expect("trace holds at least the output layer");
    if !out.is_finite() {
        return Err(Error::NonFinite("forward output".into()));
    }
    Ok(out)
}

/// Penultimate-layer activations (the last hidden layer, or the inputs
/// themselves for a model without hidden layers).
pub fn features(spec: &ModelSpec, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
    spec.check_params(params)?;
    spec.check_inputs(inputs)?;
    let mut trace = forward_trace(spec, params.as_slice(), inputs);
    trace.pop();
    Ok(trace.pop().expect("trace holds the input layer"))
}

/// Mean data loss plus `(γ/2)·‖θ‖²`.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch, weight_decay: f64) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    check_weight_decay(weight_decay)?;
    let out = forward_trace(spec, params.as_slice(), batch.inputs())
        .pop()
        .expect("output layer");
    let (data, _) = output_loss(spec, &out, batch.targets());
    let total = data + regularizer(params.as_slice(), weight_decay);
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(total)
}

/// Per-sample data loss (no regularizer).
pub fn sample_losses(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let out = forward_trace(spec, params.as_slice(), batch.inputs())
        .pop()
        .expect("output layer");
    let n = batch.len();
    let losses = (0..n)
        .map(|i| {
            let row = Matrix::new(1, out.cols(), out.row(i).to_vec()).expect("row shape");
            let targets = match batch.targets() {
                Targets::Classes(l) => Targets::Classes(vec![l[i]]),
                Targets::Values(t) => {
                    Targets::Values(Matrix::new(1, t.cols(), t.row(i).to_vec()).expect("row shape"))
                }
            };
            output_loss(spec, &row, &targets).0
        })
        .collect();
    Ok(losses)
}

/// Exact reverse-mode gradient of [`loss`], including `γ·θ`.
pub fn grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weight_decay: f64,
) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch, weight_decay).map(|(_, g)| g)
}

/// [`loss`] and [`grad`] from a single forward/backward sweep.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weight_decay: f64,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    check_weight_decay(weight_decay)?;
    let theta = params.as_slice();
    let trace = forward_trace(spec, theta, batch.inputs());
    let (data_loss, mut delta) = output_loss(spec, trace.last().expect("output"), batch.targets());

    let layout = spec.layout();
    let mut g = vec![0.0; theta.len()];
    let n = batch.len();
    for (l, slot) in layout.iter().enumerate().rev() {
        let a_prev = &trace[l];
        let weights = &theta[slot.weight_offset..slot.bias_offset];
        {
            let (gw, gb) = g[slot.weight_offset..slot.end()].split_at_mut(slot.fan_in * slot.fan_out);
            for i in 0..n {
                let d = delta.row(i);
                let x = a_prev.row(i);
                for (o, &d_o) in d.iter().enumerate() {
                    gb[o] += d_o;
                    linalg::axpy(d_o, x, &mut gw[o * slot.fan_in..(o + 1) * slot.fan_in]);
                }
            }
        }
        if l == 0 {
            break;
        }
        // Back through the weights and the previous layer's activation.
        let mut prev_delta = Matrix::zeros(n, slot.fan_in);
        for i in 0..n {
            let d = delta.row(i);
            let a = a_prev.row(i);
            let pd = prev_delta.row_mut(i);
            for (o, &d_o) in d.iter().enumerate() {
                linalg::axpy(d_o, &weights[o * slot.fan_in..(o + 1) * slot.fan_in], pd);
            }
            for (p, &a_j) in pd.iter_mut().zip(a) {
                *p *= spec.activation.derivative_from_output(a_j);
            }
        }
        delta = prev_delta;
    }

    if weight_decay != 0.0 {
        linalg::axpy(weight_decay, theta, &mut g);
    }
    let total = data_loss + regularizer(theta, weight_decay);
    if !total.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok((total, ParamVector::from_vec_unchecked(g)))
}

/// Hessian-vector product `H·v` of [`loss`] at `params`.
///
/// The data term is a central difference of the exact gradient with step
/// `h = fd_step/‖v‖`; the regularizer contributes `γ·v` exactly. A zero `v`
/// returns the zero vector.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
    weight_decay: f64,
    fd_step: f64,
) -> Result<ParamVector> {
    spec.check_params(params)?;
    check_dims("hvp direction", params.dim(), v.dim())?;
    check_weight_decay(weight_decay)?;
    if !(fd_step > 0.0 && fd_step.is_finite()) {
        return Err(Error::invalid(format!("fd_step must be positive, got {fd_step}")));
    }
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return Ok(ParamVector::zeros(v.dim()));
    }
    let h = fd_step / v_norm;
    let plus = grad(spec, &params.add_scaled(h, v)?, batch, 0.0)?;
    let minus = grad(spec, &params.add_scaled(-h, v)?, batch, 0.0)?;
    let inv = 1.0 / (2.0 * h);
    let out: Vec<f64> = plus
        .as_slice()
        .iter()
        .zip(minus.as_slice())
        .zip(v.as_slice())
        .map(|((p, m), vi)| (p - m) * inv + weight_decay * vi)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hessian-vector product".into()));
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

/// `½·θᵀAθ` with symmetric `A`: a loss with constant Hessian, used as an
/// analytic fixture for the perturbation dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    a: Matrix,
}

impl QuadraticLoss {
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::invalid("quadratic form needs a non-empty square matrix"));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("quadratic form matrix".into()));
        }
        if !a.is_symmetric(1e-12) {
            return Err(Error::invalid("quadratic form matrix must be symmetric"));
        }
        Ok(Self { a })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn loss(&self, theta: &ParamVector) -> Result<f64> {
        let g = self.a.matvec(theta.as_slice())?;
        Ok(0.5 * linalg::dot(theta.as_slice(), &g))
    }

    pub fn grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        ParamVector::new(self.a.matvec(theta.as_slice())?)
    }

    /// Exact `A·v`.
    pub fn hvp(&self, v: &ParamVector) -> Result<ParamVector> {
        ParamVector::new(self.a.matvec(v.as_slice())?)
    }
}

/// Convenience: `½θᵀAθ` and `Aθ`.
pub fn qloss(a: &Matrix, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    let q = QuadraticLoss::new(a.clone())?;
    Ok((q.loss(theta)?, q.grad(theta)?))
}
