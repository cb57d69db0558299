//! Python bindings: config handling, the relational loss, memory banks, EMA,
//! the LR schedule, KNN and a small training driver.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cgh_core::config::{load_config_with_overrides, ContextVariant, TrainConfig};
use cgh_core::data::{load_splits, Splits};
use cgh_core::distill::{self, SampleEmbeddings, SimilarityDistribution, Temperatures};
use cgh_core::eval::{FeatureKind, Voting};
use cgh_core::nn::{ParamStore, Tensor};
use cgh_core::pipeline::{self, Role};
use cgh_core::train::{pretrain as core_pretrain, PretrainOptions, StepMetrics, TrainState};
use cgh_core::CghError;

fn err(e: CghError) -> PyErr {
    match e {
        CghError::Io(_) | CghError::Checkpoint(_) | CghError::Dataset(_) | CghError::NonFiniteLoss { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix_f32(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "TrainConfig", module = "cgh", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Parses TOML text, then applies `key=value` overrides.
    #[new]
    #[pyo3(signature = (toml, overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        TrainConfig::from_toml_with_overrides(toml, &overrides).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        load_config_with_overrides(&path, &overrides).map(|inner| Self { inner }).map_err(err)
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::new(&self.inner.to_toml_string(), overrides)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn bank_size(&self) -> usize {
        self.inner.bank_size
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn tau_s(&self) -> f64 {
        self.inner.tau_s
    }

    #[getter]
    fn tau_t(&self) -> f64 {
        self.inner.tau_t
    }

    #[getter]
    fn tau_h(&self) -> f64 {
        self.inner.tau_h
    }

    #[getter]
    fn ema_momentum(&self) -> f64 {
        self.inner.ema_momentum
    }

    #[getter]
    fn context(&self) -> &'static str {
        self.inner.context.as_str()
    }

    #[getter]
    fn layer_set(&self) -> Vec<usize> {
        self.inner.layer_set.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(hash={}, context={})", &self.inner.hash()[..12], self.inner.context.as_str())
    }
}

#[pyclass(name = "MemoryBank", module = "cgh", skip_from_py_object)]
#[derive(Clone)]
struct PyMemoryBank {
    inner: distill::MemoryBank,
}

#[pymethods]
impl PyMemoryBank {
    /// Random unit-norm bank.
    #[new]
    #[pyo3(signature = (capacity, dim, seed = 0))]
    fn new(capacity: usize, dim: usize, seed: u64) -> PyResult<Self> {
        let mut rng = cgh_core::rng::stream(seed, cgh_core::rng::Stream::BankInit, &[]);
        distill::MemoryBank::init(capacity, dim, &mut rng).map(|inner| Self { inner }).map_err(err)
    }

    /// Bank from explicit unit-norm rows.
    #[staticmethod]
    #[pyo3(signature = (entries, cursor = 0))]
    fn from_entries(entries: Vec<Vec<f64>>, cursor: usize) -> PyResult<Self> {
        distill::MemoryBank::from_parts(matrix(entries)?, cursor, None).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn cursor(&self) -> usize {
        self.inner.cursor()
    }

    fn entries(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.entries().to_owned())
    }

    fn enqueue(&mut self, batch: Vec<Vec<f64>>) -> PyResult<()> {
        let b = matrix(batch)?;
        self.inner.enqueue(b.view()).map_err(err)
    }

    fn similarities(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = matrix(z)?;
        self.inner.similarities(z.view()).map(|a| rows(&a)).map_err(err)
    }

    fn distributions(&self, z: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
        let z = matrix(z)?;
        self.inner.distributions(z.view(), tau).map(|a| rows(&a)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.capacity()
    }
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    distill::cosine_similarity(&u, &v).map_err(err)
}

#[pyfunction]
fn similarity_distribution(z: Vec<f64>, bank: &PyMemoryBank, tau: f64) -> PyResult<Vec<f64>> {
    distill::similarity_distribution(&z, &bank.inner, tau).map(|d| d.0).map_err(err)
}

#[pyfunction]
fn cross_entropy(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    distill::cross_entropy(&SimilarityDistribution(pred), &SimilarityDistribution(target)).map_err(err)
}

/// Single-sample objective; returns `{"l_gh", "l_hg", "total"}`.
#[pyfunction]
#[pyo3(signature = (
    student_global, teacher_global, bank, *,
    student_hyper = None, teacher_hyper = None, hyper_bank = None,
    variant = "cross", tau_s = 0.1, tau_t = 0.04, tau_h = 0.08,
))]
#[allow(clippy::too_many_arguments)]
fn cgh_loss<'py>(
    py: Python<'py>,
    student_global: Vec<f64>,
    teacher_global: Vec<f64>,
    bank: &PyMemoryBank,
    student_hyper: Option<Vec<f64>>,
    teacher_hyper: Option<Vec<f64>>,
    hyper_bank: Option<PyRef<'py, PyMemoryBank>>,
    variant: &str,
    tau_s: f64,
    tau_t: f64,
    tau_h: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let variant: ContextVariant = variant.parse().map_err(err)?;
    let student = SampleEmbeddings { global: &student_global, hyper: student_hyper.as_deref() };
    let teacher = SampleEmbeddings { global: &teacher_global, hyper: teacher_hyper.as_deref() };
    let temps = Temperatures { student: tau_s, teacher: tau_t, hyper: tau_h };
    let l = distill::cgh_loss(student, teacher, &bank.inner, hyper_bank.as_deref().map(|b| &b.inner), temps, variant)
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("l_gh", l.l_gh)?;
    d.set_item("l_hg", l.l_hg)?;
    d.set_item("total", l.total)?;
    Ok(d)
}

/// `m * teacher + (1 - m) * student` on flat f32 vectors.
#[pyfunction]
fn ema_update(teacher: Vec<f32>, student: Vec<f32>, m: f64) -> PyResult<Vec<f32>> {
    let store = |v: Vec<f32>| -> PyResult<ParamStore> {
        let mut p = ParamStore::new();
        p.add("x", Tensor::from_vec(&[v.len()], v).map_err(err)?);
        Ok(p)
    };
    let mut t = store(teacher)?;
    cgh_core::ema::ema_update_store(&mut t, &store(student)?, m).map_err(err)?;
    Ok(t.tensors()[0].data.clone())
}

#[pyfunction]
fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    cgh_core::optim::cosine_lr(base, step, total, warmup)
}

/// Weighted cosine KNN; returns `{"per_k": [(k, acc)], "best_k", "best_accuracy"}`.
#[pyfunction]
#[pyo3(signature = (train, train_labels, val, val_labels, num_classes, ks = vec![10, 20, 100, 200], tau = 0.07))]
fn knn_classify<'py>(
    py: Python<'py>,
    train: Vec<Vec<f32>>,
    train_labels: Vec<usize>,
    val: Vec<Vec<f32>>,
    val_labels: Vec<usize>,
    num_classes: usize,
    ks: Vec<usize>,
    tau: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (t, v) = (matrix_f32(train)?, matrix_f32(val)?);
    let r = cgh_core::eval::knn_classify(t.view(), &train_labels, v.view(), &val_labels, num_classes, &ks, Voting::Weighted { tau })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("per_k", r.per_k)?;
    d.set_item("best_k", r.best_k)?;
    d.set_item("best_accuracy", r.best_accuracy)?;
    Ok(d)
}

fn metrics_dict<'py>(py: Python<'py>, m: &StepMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", m.step)?;
    d.set_item("epoch", m.epoch)?;
    d.set_item("L", m.loss)?;
    d.set_item("L_gh", m.l_gh)?;
    d.set_item("L_hg", m.l_hg)?;
    d.set_item("lr", m.lr)?;
    d.set_item("step_time_ms", m.step_time_ms)?;
    Ok(d)
}

/// Training state plus the configured dataset.
#[pyclass(name = "Trainer", module = "cgh", unsendable)]
struct PyTrainer {
    state: TrainState,
    splits: Splits,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        let splits = load_splits(&config.inner).map_err(err)?;
        let state = TrainState::new(&config.inner).map_err(err)?;
        Ok(Self { state, splits })
    }

    /// Resumes from a checkpoint file; data comes from the stored config.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = TrainState::load(&path).map_err(err)?;
        let splits = load_splits(&state.cfg).map_err(err)?;
        Ok(Self { state, splits })
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.step
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig { inner: self.state.cfg.clone() }
    }

    fn steps_per_epoch(&self) -> PyResult<usize> {
        self.state.steps_per_epoch(self.splits.train.len()).map_err(err)
    }

    /// One optimizer step on explicit training indices at the scheduled LR.
    fn train_step<'py>(&mut self, py: Python<'py>, indices: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
        let n = self.splits.train.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(PyValueError::new_err(format!("index {bad} out of range for {n} training images")));
        }
        let lr = self.state.lr(n).map_err(err)?;
        let m = self.state.train_step(&self.splits.train, &indices, lr).map_err(err)?;
        metrics_dict(py, &m)
    }

    /// Runs one epoch and returns its per-step metrics.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut out = Vec::new();
        self.state.run_epoch(&self.splits.train, |_| {}, |m| {
            out.push(m);
            Ok(())
        })
        .map_err(err)?;
        out.iter().map(|m| metrics_dict(py, m)).collect()
    }

    /// Best KNN accuracy over `ks` on pooled features.
    #[pyo3(signature = (ks = vec![10, 20, 100, 200], role = "student"))]
    fn knn(&self, ks: Vec<usize>, role: &str) -> PyResult<f64> {
        let role: Role = role.parse().map_err(err)?;
        pipeline::knn_eval(&self.state, &self.splits, &ks, FeatureKind::Pooled, role).map(|r| r.best_accuracy).map_err(err)
    }

    /// Pooled, hypercolumn, projected or projected-hyper features of a split.
    #[pyo3(signature = (kind = "pooled", split = "val", role = "student"))]
    fn features(&self, kind: &str, split: &str, role: &str) -> PyResult<Vec<Vec<f32>>> {
        let kind: FeatureKind = kind.parse().map_err(err)?;
        let role: Role = role.parse().map_err(err)?;
        let data = match split {
            "train" => &self.splits.train,
            "val" => &self.splits.val,
            _ => return Err(PyValueError::new_err("split must be train or val")),
        };
        pipeline::features(&self.state, data, kind, role).map(|a| rows(&a)).map_err(err)
    }

    fn labels(&self, split: &str) -> PyResult<Vec<usize>> {
        match split {
            "train" => Ok(self.splits.train.labels.clone()),
            "val" => Ok(self.splits.val.labels.clone()),
            _ => Err(PyValueError::new_err("split must be train or val")),
        }
    }

    fn teacher_digest(&self) -> String {
        format!("{}{}", self.state.model.teacher.params.digest(), self.state.model.teacher.buffers.digest())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(err)
    }
}

/// Full pretraining into a new run directory; returns `(run_dir, checkpoint)`.
#[pyfunction]
#[pyo3(signature = (config, runs = PathBuf::from("runs")))]
fn pretrain(config: &PyTrainConfig, runs: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
    let splits = load_splits(&config.inner).map_err(err)?;
    let out = core_pretrain(&config.inner, &splits, &PretrainOptions { run_root: runs, ..Default::default() }).map_err(err)?;
    Ok((out.run_dir, out.checkpoint))
}

#[pymodule]
fn cgh(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyMemoryBank>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cgh_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
