//! Python bindings: models, derivatives, map exponents, the learning-rate
//! rule, synthetic domains and full training runs.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use leaware_core::domains::{self, DomainShift};
use leaware_core::harness::{self, ExperimentConfig, RunStatus};
use leaware_core::lyapunov::{self, Map1d};
use leaware_core::{diffengine, optimizers};
use leaware_core::{Activation, Batch, DomainDataset, Error, Matrix, OutputKind, ParamVector};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::PerturbationBlowup { .. } | Error::OptimizerDiverged { .. } | Error::OrbitEscaped { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn params(v: Vec<f64>) -> PyResult<ParamVector> {
    ParamVector::new(v).map_err(to_py)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

#[pyclass(name = "ModelSpec", module = "leaware", frozen, skip_from_py_object)]
struct PyModelSpec {
    inner: diffengine::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (layer_sizes, activation="tanh", output="softmax_cross_entropy"))]
    fn new(layer_sizes: Vec<usize>, activation: &str, output: &str) -> PyResult<Self> {
        let activation = match activation {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            other => return Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
        };
        let output = match output {
            "softmax_cross_entropy" => OutputKind::SoftmaxCrossEntropy,
            "mean_squared_error" => OutputKind::MeanSquaredError,
            other => return Err(PyValueError::new_err(format!("unknown output {other:?}"))),
        };
        let inner = diffengine::ModelSpec::new(layer_sizes, activation, output).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes().to_vec()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        self.inner.init_params(seed).into_vec()
    }

    fn predict(&self, params: Vec<f64>, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = diffengine::predict(&self.inner, &self::params(params)?, &matrix(inputs)?).map_err(to_py)?;
        Ok((0..out.rows()).map(|i| out.row(i).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({:?})", self.inner.layer_sizes())
    }
}

/// A labelled sample set with a domain tag.
#[pyclass(name = "Dataset", module = "leaware", frozen, skip_from_py_object)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels, domain="custom", num_classes=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, domain: &str, num_classes: Option<usize>) -> PyResult<Self> {
        let inner = DomainDataset::new(matrix(features)?, labels, num_classes, domain, 0).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: domains::load_csv(path).map_err(to_py)?,
        })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        domains::save_csv(&self.inner, path).map_err(to_py)
    }

    fn features(&self) -> Vec<Vec<f64>> {
        let m = self.inner.features();
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain().to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn stratified_subsample(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.stratified_subsample(fraction, seed).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(domain={:?}, len={})", self.inner.domain(), self.inner.len())
    }
}

fn batch(x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<Batch> {
    Batch::classification(matrix(x)?, y).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (spec, params, x, y, weight_decay=0.0))]
fn loss(spec: &PyModelSpec, params: Vec<f64>, x: Vec<Vec<f64>>, y: Vec<usize>, weight_decay: f64) -> PyResult<f64> {
    let b = batch(x, y)?;
    diffengine::loss(&spec.inner, &self::params(params)?, &b, weight_decay).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (spec, params, x, y, weight_decay=0.0))]
fn grad(spec: &PyModelSpec, params: Vec<f64>, x: Vec<Vec<f64>>, y: Vec<usize>, weight_decay: f64) -> PyResult<Vec<f64>> {
    let b = batch(x, y)?;
    let g = diffengine::grad(&spec.inner, &self::params(params)?, &b, weight_decay).map_err(to_py)?;
    Ok(g.into_vec())
}

#[pyfunction]
#[pyo3(signature = (spec, params, x, y, v, weight_decay=0.0, fd_step=diffengine::DEFAULT_FD_STEP))]
fn hvp(
    spec: &PyModelSpec,
    params: Vec<f64>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    v: Vec<f64>,
    weight_decay: f64,
    fd_step: f64,
) -> PyResult<Vec<f64>> {
    let b = batch(x, y)?;
    let v = ParamVector::new(v).map_err(to_py)?;
    let hv = diffengine::hvp(&spec.inner, &self::params(params)?, &b, &v, weight_decay, fd_step).map_err(to_py)?;
    Ok(hv.into_vec())
}

/// Lyapunov exponent of a `logistic`, `tent` or `linear` map orbit.
#[pyfunction]
#[pyo3(signature = (kind, param, x0=0.3, steps=100_000))]
fn map_le(kind: &str, param: f64, x0: f64, steps: usize) -> PyResult<f64> {
    let map = Map1d::parse(kind, param).map_err(to_py)?;
    Ok(lyapunov::map_le(map, x0, steps).map_err(to_py)?.value)
}

#[pyfunction]
#[pyo3(signature = (lr, delta_le, beta=0.1, lr_floor=1e-7))]
fn adjust_lr(lr: f64, delta_le: f64, beta: f64, lr_floor: f64) -> PyResult<f64> {
    optimizers::adjust_lr(lr, delta_le, beta, lr_floor).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (n, noise=0.1, seed=0))]
fn gen_two_moons(n: usize, noise: f64, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: domains::gen_two_moons(n, noise, seed).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (n, num_classes, spread=0.5, seed=0))]
fn gen_blobs(n: usize, num_classes: usize, spread: f64, seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: domains::gen_blobs(n, num_classes, spread, seed).map_err(to_py)?,
    })
}

/// Rotation in degrees, then scale, translation and additive Gaussian noise.
#[pyfunction]
#[pyo3(signature = (data, tag, rotation_deg=0.0, translation=None, scale=1.0, noise=0.0, seed=0))]
fn shift_domain(
    data: &PyDataset,
    tag: &str,
    rotation_deg: f64,
    translation: Option<Vec<f64>>,
    scale: f64,
    noise: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let shift = DomainShift {
        rotation: rotation_deg.to_radians(),
        translation: translation.unwrap_or_default(),
        scale,
        noise,
    };
    Ok(PyDataset {
        inner: domains::shift_domain(&data.inner, &shift, tag, seed).map_err(to_py)?,
    })
}

#[pyfunction]
fn evaluate(spec: &PyModelSpec, params: Vec<f64>, data: &PyDataset) -> PyResult<f64> {
    harness::evaluate(&spec.inner, &self::params(params)?, &data.inner).map_err(to_py)
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml_string()
}

/// Trains from a TOML configuration (empty for the defaults). Returns a
/// dict with `status`, `params`, `target_tags` and per-epoch `metrics`.
#[pyfunction]
#[pyo3(signature = (config="", seed=None))]
fn run_training<'py>(py: Python<'py>, config: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ExperimentConfig::from_toml_str(config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = py.detach(|| harness::run_training(&cfg)).map_err(to_py)?;
    let out = PyDict::new(py);
    let status = match &result.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { reason, .. } => format!("diverged: {reason}"),
    };
    out.set_item("status", status)?;
    out.set_item("params", result.params.as_slice().to_vec())?;
    out.set_item("target_tags", result.target_tags.clone())?;
    let rows = result
        .metrics
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("iteration", r.iteration)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("lr", r.lr)?;
            d.set_item("le", r.le)?;
            d.set_item("delta_le", r.delta_le)?;
            d.set_item("renorm_count", r.renorm_count)?;
            let acc = PyDict::new(py);
            for (tag, a) in &r.accuracies {
                acc.set_item(tag, a)?;
            }
            d.set_item("accuracies", acc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("metrics", rows)?;
    Ok(out)
}

#[pymodule]
fn leaware(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad, m)?)?;
    m.add_function(wrap_pyfunction!(hvp, m)?)?;
    m.add_function(wrap_pyfunction!(map_le, m)?)?;
    m.add_function(wrap_pyfunction!(adjust_lr, m)?)?;
    m.add_function(wrap_pyfunction!(gen_two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(gen_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(shift_domain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_training, m)?)?;
    Ok(())
}
