//! Python bindings: label machinery, IsBN, the model, benchmark generation
//! and training runs.

use std::path::PathBuf;

use mdknet::dvc::{self, ScheduleConfig, VirtualLabel};
use mdknet::isbn::{self, AffinePair, Mode};
use mdknet::losses::{self, Variant};
use mdknet::numerics::{self, Matrix, Tensor4};
use mdknet::synth::{self, BenchmarkSpec};
use mdknet::trainer::{self, MetricRow, ModelConfig, RunOptions, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Bad arguments raise `ValueError`; failures during a computation or run
/// raise `RuntimeError`.
fn py_err(e: mdknet::Error) -> PyErr {
    use mdknet::Error as E;
    let bad_argument = e.is_config_error()
        || matches!(e, E::Shape { .. } | E::InvalidPair(_) | E::OutOfRange { .. } | E::DegenerateBatch(_) | E::EmptySpatial);
    if bad_argument {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(py_err)
}

fn schedule(kappa: usize, tau: usize, iota: usize, rho_max: f64) -> PyResult<ScheduleConfig> {
    ScheduleConfig::new(kappa, tau, iota, rho_max).map_err(py_err)
}

#[pyfunction]
fn softmax(z: Vec<f64>) -> Vec<f64> {
    numerics::softmax(&z)
}

#[pyfunction]
fn sigmoid(z: Vec<f64>) -> Vec<f64> {
    numerics::sigmoid(&z)
}

#[pyfunction]
fn num_classes(m: usize) -> usize {
    dvc::num_classes(m)
}

#[pyfunction]
fn pair_index(s: usize, t: usize, m: usize) -> PyResult<usize> {
    dvc::pair_index(s, t, m).map_err(py_err)
}

#[pyfunction]
fn init_virtual_label(domain: usize, m: usize) -> PyResult<Vec<f64>> {
    Ok(dvc::init_virtual_label(domain, m).map_err(py_err)?.0)
}

#[pyfunction]
fn correct_prediction(pred: Vec<f64>, t: usize, m: usize) -> PyResult<Vec<f64>> {
    Ok(dvc::correct_prediction(&VirtualLabel(pred), t, m).map_err(py_err)?.0)
}

#[pyfunction]
#[pyo3(signature = (epoch, kappa=40, tau=5, iota=120, rho_max=0.5))]
fn alpha_schedule(epoch: usize, kappa: usize, tau: usize, iota: usize, rho_max: f64) -> PyResult<f64> {
    Ok(dvc::alpha_schedule(epoch, &schedule(kappa, tau, iota, rho_max)?))
}

#[pyfunction]
#[pyo3(signature = (epoch, kappa=40, tau=5, iota=120))]
fn window_index(epoch: usize, kappa: usize, tau: usize, iota: usize) -> PyResult<usize> {
    dvc::window_index(epoch, &schedule(kappa, tau, iota, 0.5)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (epoch, kappa=40, tau=5, iota=120))]
fn is_window_end(epoch: usize, kappa: usize, tau: usize, iota: usize) -> PyResult<bool> {
    Ok(dvc::is_window_end(epoch, &schedule(kappa, tau, iota, 0.5)?))
}

/// Per-image virtual-label state across fusion windows.
#[pyclass(name = "LabelState")]
struct PyLabelState {
    inner: dvc::LabelState,
}

#[pymethods]
impl PyLabelState {
    #[new]
    fn new(image_id: u64, domain: usize, m: usize) -> PyResult<Self> {
        Ok(PyLabelState { inner: dvc::LabelState::new(image_id, domain, m).map_err(py_err)? })
    }

    fn observe(&mut self, corrected: Vec<f64>) -> PyResult<()> {
        self.inner.observe(&VirtualLabel(corrected)).map_err(py_err)
    }

    fn finalize_window(&mut self, alpha: f64) -> Vec<f64> {
        self.inner.finalize_window(alpha).0.clone()
    }

    #[pyo3(signature = (epoch, kappa=40, tau=5, iota=120))]
    fn label_for_epoch(&self, epoch: usize, kappa: usize, tau: usize, iota: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.label_for_epoch(epoch, &schedule(kappa, tau, iota, 0.5)?).0.clone())
    }

    #[getter]
    fn v0(&self) -> Vec<f64> {
        self.inner.v0.0.clone()
    }

    #[getter]
    fn current_target(&self) -> Vec<f64> {
        self.inner.current_target.0.clone()
    }

    #[getter]
    fn obs_count(&self) -> usize {
        self.inner.obs_count
    }

    fn __repr__(&self) -> String {
        format!(
            "LabelState(image_id={}, domain={}, obs_count={})",
            self.inner.image_id, self.inner.domain, self.inner.obs_count
        )
    }
}

/// Train-mode IsBN on a flat `(B, C, H, W)` buffer with per-instance
/// `gamma`/`beta` rows. Returns `(output, mu, sigma)`.
#[pyfunction]
fn isbn_forward(
    x: Vec<f64>,
    shape: (usize, usize, usize, usize),
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let x = Tensor4::from_vec([shape.0, shape.1, shape.2, shape.3], x).map_err(py_err)?;
    let stats = isbn::batch_stats(&x, isbn::DEFAULT_EPS).map_err(py_err)?;
    let affine = AffinePair { gamma: matrix(gamma)?, beta: matrix(beta)? };
    let y = isbn::isbn_fwd(&x, &stats, &affine, Mode::Train).map_err(py_err)?;
    Ok((y.into_vec(), stats.mu, stats.sigma))
}

#[pyfunction]
fn virtual_class_loss(logits: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let targets: Vec<VirtualLabel> = targets.into_iter().map(VirtualLabel).collect();
    let (l, g) = losses::virtual_class_loss(&matrix(logits)?, &targets).map_err(py_err)?;
    Ok((l, rows(&g)))
}

#[pyfunction]
fn gt_class_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (l, g) = losses::gt_class_loss(&matrix(logits)?, &labels).map_err(py_err)?;
    Ok((l, rows(&g)))
}

#[pyfunction]
#[pyo3(signature = (points, height=16, width=16, kernel_size=5, sigma=1.0))]
fn render_density(points: Vec<(f64, f64)>, height: usize, width: usize, kernel_size: usize, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    let pts: Vec<[f64; 2]> = points.into_iter().map(|(r, c)| [r, c]).collect();
    Ok(rows(&synth::render_density(&pts, height, width, kernel_size, sigma).map_err(py_err)?))
}

#[pyfunction]
fn mae_rmse(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<(f64, f64)> {
    synth::mae_rmse(&pred, &gt).map_err(py_err)
}

/// Writes the default three-domain benchmark to `root`. Returns
/// `(train, test)` scene counts per domain.
#[pyfunction]
#[pyo3(signature = (root, seed=0))]
fn build_benchmark(root: PathBuf, seed: u64) -> PyResult<Vec<(usize, usize)>> {
    let summary = synth::build_benchmark(&BenchmarkSpec::default_recipe(seed), &root).map_err(py_err)?;
    Ok(summary.counts)
}

/// The full network: backbone, parameterizer, IsBN and density predictor.
#[pyclass(name = "Model")]
struct PyModel {
    inner: trainer::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant="vcl", num_domains=3, seed=0, channels=16, latent=32))]
    fn new(variant: &str, num_domains: usize, seed: u64, channels: usize, latent: usize) -> PyResult<Self> {
        let config = ModelConfig { channels, latent, num_domains, variant: self::variant(variant)? };
        Ok(PyModel { inner: trainer::Model::init(config, seed).map_err(py_err)? })
    }

    /// Batch-statistics forward pass on a flat `(B, 1, H, W)` input. Returns
    /// a dict with the flat density output, logits and γ rows.
    fn forward<'py>(&self, py: Python<'py>, x: Vec<f64>, batch: usize, height: usize, width: usize) -> PyResult<Bound<'py, PyDict>> {
        let x = Tensor4::from_vec([batch, 1, height, width], x).map_err(py_err)?;
        let t = self.inner.forward(&x, Mode::Train).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("counts", t.predicted_counts())?;
        d.set_item("output", t.output.into_vec())?;
        d.set_item("logits", rows(&t.logits))?;
        d.set_item("gamma", rows(&t.affine.gamma))?;
        Ok(d)
    }

    fn zero_decoder(&mut self) {
        self.inner.zero_decoder();
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_values()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.params.slots.iter().map(|s| s.name.clone()).collect()
    }
}

fn metric_dicts<'py>(py: Python<'py>, rows: &[MetricRow]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("variant", r.variant.as_str())?;
            d.set_item("domain", r.domain)?;
            d.set_item("MAE", r.mae)?;
            d.set_item("RMSE", r.rmse)?;
            d.set_item("l_den", r.l_den)?;
            d.set_item("l_cls", r.l_cls)?;
            d.set_item("alpha", r.alpha)?;
            Ok(d)
        })
        .collect()
}

/// Trains one variant on the benchmark at `dataset`, writing the usual
/// artifacts under `out_dir`. Returns the metrics history as dicts.
#[pyfunction]
#[pyo3(signature = (
    dataset, out_dir, variant="vcl", epochs=120, kappa=40, tau=5, rho_max=0.5,
    lambda_=1.0, batch_size=16, learning_rate=1e-3, seed=0, eval_every=10
))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    out_dir: PathBuf,
    variant: &str,
    epochs: usize,
    kappa: usize,
    tau: usize,
    rho_max: f64,
    lambda_: f64,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    eval_every: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = TrainConfig {
        variant: self::variant(variant)?,
        epochs,
        kappa,
        tau,
        rho_max,
        lambda: lambda_,
        batch_size,
        learning_rate,
        seed,
        eval_every,
        dataset_path: dataset,
        ..TrainConfig::default()
    };
    let result = py
        .detach(|| trainer::run_experiment(&cfg, &out_dir, &RunOptions::default()))
        .map_err(py_err)?;
    metric_dicts(py, &result.history)
}

/// Evaluates a saved checkpoint on a benchmark's test split. Returns
/// `(domain, scenes, MAE, RMSE)` rows.
#[pyfunction]
fn evaluate_checkpoint(checkpoint: PathBuf, data: PathBuf) -> PyResult<Vec<(usize, usize, f64, f64)>> {
    let ck = trainer::Checkpoint::load(&checkpoint).map_err(py_err)?;
    let test = synth::load_split(&data, synth::Split::Test).map_err(py_err)?;
    let test = trainer::TensorData::from_dataset(&test).map_err(py_err)?;
    let ev = trainer::evaluate(&ck.state.model, &test).map_err(py_err)?;
    Ok(ev.domains.iter().map(|d| (d.domain, d.scenes, d.mae, d.rmse)).collect())
}

#[pymodule]
fn mdknet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(num_classes, m)?)?;
    m.add_function(wrap_pyfunction!(pair_index, m)?)?;
    m.add_function(wrap_pyfunction!(init_virtual_label, m)?)?;
    m.add_function(wrap_pyfunction!(correct_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(window_index, m)?)?;
    m.add_function(wrap_pyfunction!(is_window_end, m)?)?;
    m.add_function(wrap_pyfunction!(isbn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(virtual_class_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gt_class_loss, m)?)?;
    m.add_function(wrap_pyfunction!(render_density, m)?)?;
    m.add_function(wrap_pyfunction!(mae_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(build_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_class::<PyLabelState>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
