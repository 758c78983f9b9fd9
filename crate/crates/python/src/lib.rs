//! Python bindings: datasets, configuration, training and evaluation.

use std::path::PathBuf;

use kanite_core::autodiff::Tensor;
use kanite_core::data::{self, GeneratorConfig, ObservationalDataset, SplitSpec};
use kanite_core::kan::Architecture;
use kanite_core::trainer::{self, LossKind, MmdKernel, OptimizerKind, TrainConfig, TrainedModel};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: kanite_core::Error) -> PyErr {
    match e {
        kanite_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        e @ kanite_core::Error::TrainingAborted(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Observational data: covariates, 1-based treatments, outcomes and
/// optional true potential outcomes.
#[pyclass(name = "Dataset", module = "kanite")]
struct PyDataset {
    inner: ObservationalDataset,
}

#[pymethods]
impl PyDataset {
    /// `t` holds 1-based treatment ids.
    #[new]
    #[pyo3(signature = (x, t, y, k, mu=None))]
    fn new(x: Vec<Vec<f64>>, t: Vec<usize>, y: Vec<f64>, k: usize, mu: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let t = t
            .into_iter()
            .map(|v| v.checked_sub(1).ok_or_else(|| PyValueError::new_err("treatment ids are 1-based")))
            .collect::<PyResult<Vec<_>>>()?;
        let mu = mu.map(tensor).transpose()?;
        let inner = ObservationalDataset::new(tensor(x)?, t, y, mu, k).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::load_csv(path).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (n=1000, k=2, dim=10, gamma=1.0, sigma=0.5, seed=0))]
    fn synthetic(n: usize, k: usize, dim: usize, gamma: f64, sigma: f64, seed: u64) -> PyResult<Self> {
        let cfg = GeneratorConfig { n, n0: dim, k, gamma, sigma, seed };
        Ok(Self { inner: data::generate_synthetic(&cfg).map_err(to_py)? })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, path).map_err(to_py)
    }

    /// Train, validation and test parts.
    #[pyo3(signature = (seed=0, train=0.63, val=0.27, test=0.10))]
    fn split(&self, seed: u64, train: f64, val: f64, test: f64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = data::split(&self.inner, &SplitSpec { train, val, test, seed }).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_covariates(&self) -> usize {
        self.inner.n0()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        matrix(&self.inner.x)
    }

    #[getter]
    fn t(&self) -> Vec<usize> {
        self.inner.t.iter().map(|v| v + 1).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn mu(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.mu.as_ref().map(matrix)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, n_covariates={}, k={})", self.inner.n(), self.inner.n0(), self.inner.k())
    }
}

/// Training settings; every keyword matches a command-line flag.
#[pyclass(name = "TrainConfig", module = "kanite")]
struct PyTrainConfig {
    inner: TrainConfig,
}

fn parse<T: std::str::FromStr<Err = kanite_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        loss="mmd", alpha=1.0, beta=1.0, lr=None, optimizer="adam", batch_size=64, max_epochs=500,
        patience=20, seed=0, grid=5, degree=3, psi_widths=None, head_widths=None, sparsify=1e-5,
        standardize_outcome=true, kernel="linear"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        loss: &str,
        alpha: f64,
        beta: f64,
        lr: Option<f64>,
        optimizer: &str,
        batch_size: usize,
        max_epochs: usize,
        patience: usize,
        seed: u64,
        grid: usize,
        degree: usize,
        psi_widths: Option<Vec<usize>>,
        head_widths: Option<Vec<usize>>,
        sparsify: f64,
        standardize_outcome: bool,
        kernel: &str,
    ) -> PyResult<Self> {
        let d = TrainConfig::default();
        let mmd_kernel = match kernel {
            "linear" => MmdKernel::Linear,
            "rbf" => MmdKernel::Rbf,
            other => return Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
        };
        let inner = TrainConfig {
            loss: parse::<LossKind>(loss)?,
            alpha,
            beta,
            lr,
            optimizer: parse::<OptimizerKind>(optimizer)?,
            batch_size,
            max_epochs,
            patience,
            seed,
            grid_size: grid,
            degree,
            psi_widths: psi_widths.unwrap_or(d.psi_widths.clone()),
            head_widths: head_widths.unwrap_or(d.head_widths.clone()),
            sparsify,
            standardize_outcome,
            mmd_kernel,
            ..d
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A trained model with its input and outcome scaling.
#[pyclass(name = "Model", module = "kanite")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainedModel::load(path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Potential outcomes, one column per treatment.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(matrix(&self.inner.predict(&tensor(x)?).map_err(to_py)?))
    }

    /// Predicted effect of treatment `a` over `b` (1-based).
    fn ite(&self, x: Vec<Vec<f64>>, a: usize, b: usize) -> PyResult<Vec<f64>> {
        let k = self.inner.model.treatments();
        if a == 0 || b == 0 || a > k || b > k {
            return Err(PyValueError::new_err(format!("treatments must lie in 1..={k}")));
        }
        let p = self.inner.predict(&tensor(x)?).map_err(to_py)?;
        Ok((0..p.rows()).map(|r| p.get(r, a - 1) - p.get(r, b - 1)).collect())
    }

    fn evaluate<'py>(&self, py: Python<'py>, ds: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let report = trainer::evaluate(&self.inner, &ds.inner).map_err(to_py)?;
        json_dict(py, &report.to_json())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        kanite_core::kan::count_parameters(&self.inner.model)
    }

    #[getter]
    fn treatments(&self) -> usize {
        self.inner.model.treatments()
    }
}

fn json_dict<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    if let Some(map) = v.as_object() {
        for (k, v) in map {
            if let Some(u) = v.as_u64() {
                d.set_item(k, u)?;
            } else if let Some(f) = v.as_f64() {
                d.set_item(k, f)?;
            } else if v.is_null() {
                d.set_item(k, py.None())?;
            } else {
                d.set_item(k, v.to_string())?;
            }
        }
    }
    Ok(d)
}

/// Trains a model; returns it with one dict per epoch.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    train: &PyDataset,
    val: &PyDataset,
    config: &PyTrainConfig,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let (model, log) = trainer::train(&train.inner, &val.inner, &config.inner).map_err(to_py)?;
    let epochs = log
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_l1", e.train_l1)?;
            d.set_item("train_l2", e.train_l2)?;
            d.set_item("train_total", e.train_total)?;
            d.set_item("val_l1", e.val_l1)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: model }, epochs))
}

/// Trainable parameter count of an architecture.
#[pyfunction]
#[pyo3(signature = (n_covariates, treatments, psi_widths, head_widths, grid=5, degree=3))]
fn count_parameters(
    n_covariates: usize,
    treatments: usize,
    psi_widths: Vec<usize>,
    head_widths: Vec<usize>,
    grid: usize,
    degree: usize,
) -> PyResult<usize> {
    let arch = Architecture { n_covariates, psi_widths, head_widths, treatments, grid_size: grid, degree };
    arch.validate().map_err(to_py)?;
    Ok(arch.parameter_count())
}

/// Noiseless synthetic outcome of 1-based treatment `t`.
#[pyfunction]
fn outcome_function(t: usize, x: Vec<f64>) -> PyResult<f64> {
    if t == 0 || x.is_empty() {
        return Err(PyValueError::new_err("t is 1-based and x must be non-empty"));
    }
    Ok(data::outcome_function(t, &x))
}

#[pymodule]
fn kanite(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(outcome_function, m)?)?;
    Ok(())
}
