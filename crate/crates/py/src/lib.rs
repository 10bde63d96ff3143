//! Python bindings: loss closed forms, metrics, the discriminator gate,
//! toy data, task nets and whole experiments.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cycada::data::{make_toy_pair, Dataset, Labels, ToyDomainSpec, ToyShift};
use cycada::eval::{confusion, seg_metrics, ConfusionMatrix};
use cycada::losses::{self, DiscriminatorOutput, GanVariant, LossTerm, LossTerms, LossWeights};
use cycada::models::{self, ModelHandle, Mode};
use cycada::trainer::{run_experiment as run_exp, GateMonitor, RunStatus};

fn err(e: cycada::Error) -> PyErr {
    match e {
        cycada::Error::Io(e) => PyIOError::new_err(e.to_string()),
        cycada::Error::Config(_)
        | cycada::Error::InvalidArgument(_)
        | cycada::Error::Shape(_)
        | cycada::Error::NonFinite(_)
        | cycada::Error::Probability(_)
        | cycada::Error::MissingTerm(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(values: Vec<f32>, shape: &[usize]) -> PyResult<Tensor> {
    Tensor::from_vec(values, shape, &Device::Cpu).map_err(|e| err(e.into()))
}

fn scalar(t: Tensor) -> PyResult<f64> {
    t.to_dtype(candle_core::DType::F64)
        .and_then(|t| t.to_scalar::<f64>())
        .map_err(|e| err(e.into()))
}

fn variant(name: &str) -> PyResult<GanVariant> {
    match name {
        "minimax" => Ok(GanVariant::Minimax),
        "least-squares" | "lsgan" => Ok(GanVariant::LeastSquares),
        other => Err(PyValueError::new_err(format!("unknown GAN variant `{other}`"))),
    }
}

/// Mean softmax cross-entropy of `(B, K)` logits against integer labels.
#[pyfunction]
fn task_loss(logits: Vec<Vec<f32>>, labels: Vec<u32>) -> PyResult<f64> {
    let b = logits.len();
    let k = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("ragged logits"));
    }
    let x = tensor(logits.into_iter().flatten().collect(), &[b, k])?;
    let y = Tensor::from_vec(labels, b, &Device::Cpu).map_err(|e| err(e.into()))?;
    scalar(losses::task_loss(&x, &y).map_err(err)?)
}

/// Discriminator loss from per-sample probabilities of "real".
#[pyfunction]
#[pyo3(signature = (real, fake, variant_name = "minimax"))]
fn gan_loss_discriminator(real: Vec<f32>, fake: Vec<f32>, variant_name: &str) -> PyResult<f64> {
    let (nr, nf) = (real.len(), fake.len());
    let r = DiscriminatorOutput::probabilities(tensor(real, &[nr])?);
    let f = DiscriminatorOutput::probabilities(tensor(fake, &[nf])?);
    scalar(losses::gan_loss_discriminator(&r, &f, variant(variant_name)?).map_err(err)?)
}

/// Generator loss from per-sample probabilities of "real" on fakes.
#[pyfunction]
#[pyo3(signature = (fake, variant_name = "minimax"))]
fn gan_loss_generator(fake: Vec<f32>, variant_name: &str) -> PyResult<f64> {
    let n = fake.len();
    let f = DiscriminatorOutput::probabilities(tensor(fake, &[n])?);
    scalar(losses::gan_loss_generator(&f, variant(variant_name)?).map_err(err)?)
}

/// Mean absolute error between two equally long flat images.
#[pyfunction]
fn cycle_loss(original: Vec<f32>, reconstructed: Vec<f32>) -> PyResult<f64> {
    let (a, b) = (original.len(), reconstructed.len());
    scalar(losses::cycle_loss(&tensor(original, &[a])?, &tensor(reconstructed, &[b])?).map_err(err)?)
}

fn term_by_name(name: &str) -> PyResult<LossTerm> {
    LossTerm::ALL
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown loss term `{name}`")))
}

/// Weighted sum of named scalar terms; weights default to zero when omitted.
#[pyfunction]
fn cycada_objective(weights: BTreeMap<String, f64>, terms: BTreeMap<String, f64>) -> PyResult<f64> {
    let mut w = LossWeights::zero();
    for (name, v) in &weights {
        match term_by_name(name)? {
            LossTerm::Task => w.task = *v,
            LossTerm::GanImage => w.gan_image = *v,
            LossTerm::GanFeat => w.gan_feat = *v,
            LossTerm::Cycle => w.cycle = *v,
            LossTerm::Semantic => w.semantic = *v,
            LossTerm::Identity => w.identity = *v,
        }
    }
    let mut t = LossTerms::new();
    for (name, v) in terms {
        t.insert(term_by_name(&name)?, tensor(vec![v as f32], &[])?);
    }
    scalar(losses::cycada_objective(&w, &t).map_err(err)?)
}

#[pyclass(name = "ConfusionMatrix", module = "cycada_py", from_py_object)]
#[derive(Clone)]
struct PyConfusion {
    inner: ConfusionMatrix,
}

#[pymethods]
impl PyConfusion {
    #[new]
    fn new(counts: Vec<Vec<u64>>) -> PyResult<Self> {
        Ok(Self { inner: ConfusionMatrix::from_counts(counts).map_err(err)? })
    }

    /// Builds the matrix from flat prediction and ground-truth label lists.
    #[staticmethod]
    fn from_labels(pred: Vec<u32>, truth: Vec<u32>, num_classes: usize) -> PyResult<Self> {
        Ok(Self { inner: confusion(&pred, &truth, num_classes).map_err(err)? })
    }

    fn counts(&self) -> Vec<Vec<u64>> {
        self.inner.counts().to_vec()
    }

    fn accuracy(&self) -> f64 {
        self.inner.accuracy()
    }

    /// `{"per_class_iou", "miou", "fwiou", "pixel_acc"}`; undefined classes are None.
    fn seg_metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = seg_metrics(&self.inner).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("per_class_iou", m.per_class_iou)?;
        d.set_item("miou", m.miou)?;
        d.set_item("fwiou", m.fwiou)?;
        d.set_item("pixel_acc", m.pixel_acc)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("ConfusionMatrix({:?})", self.inner.counts())
    }
}

#[pyclass(name = "GateMonitor", module = "cycada_py")]
struct PyGate {
    inner: GateMonitor,
}

#[pymethods]
impl PyGate {
    #[new]
    #[pyo3(signature = (window, threshold = 0.6))]
    fn new(window: usize, threshold: f64) -> PyResult<Self> {
        Ok(Self { inner: GateMonitor::new(window, threshold).map_err(err)? })
    }

    /// Records whether each judged sample was classified correctly.
    fn record(&mut self, correct: Vec<bool>) {
        self.inner.record(correct);
    }

    fn record_step(&mut self, real_called_real: Vec<bool>, fake_called_real: Vec<bool>) {
        self.inner.record_step(&real_called_real, &fake_called_real);
    }

    fn accuracy(&self) -> Option<f64> {
        self.inner.accuracy()
    }

    fn permits(&self) -> bool {
        self.inner.permits()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Dataset", module = "cycada_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.shape;
        (c, h, w)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    /// Raw uint8 pixels of image `i`, CHW order.
    fn image(&self, i: usize) -> PyResult<Vec<u8>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.inner.image(i).to_vec())
    }

    /// Class label per image, or per pixel for dense datasets.
    fn labels(&self) -> Vec<u8> {
        match &self.inner.labels {
            Labels::Class(l) | Labels::Dense(l) => l.clone(),
        }
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map(|_| ()).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Synthetic source/target pair: `{"source_train", "source_test", "target_train", "target_test"}`.
#[pyfunction]
#[pyo3(signature = (kind = "intensity-inversion", num_classes = 2, samples_per_class = 200, seed = 0))]
fn make_toy<'py>(
    py: Python<'py>,
    kind: &str,
    num_classes: usize,
    samples_per_class: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: ToyShift = toml::Value::String(kind.to_string())
        .try_into()
        .map_err(|_| PyValueError::new_err(format!("unknown toy shift `{kind}`")))?;
    let pair = make_toy_pair(&ToyDomainSpec::classification(kind, num_classes, samples_per_class, seed)).map_err(err)?;
    let d = PyDict::new(py);
    for (key, ds) in [
        ("source_train", pair.source_train),
        ("source_test", pair.source_test),
        ("target_train", pair.target_train),
        ("target_test", pair.target_test),
    ] {
        d.set_item(key, Py::new(py, PyDataset { inner: ds })?)?;
    }
    Ok(d)
}

#[pyclass(name = "TaskNet", module = "cycada_py")]
struct PyTaskNet {
    inner: ModelHandle,
}

#[pymethods]
impl PyTaskNet {
    #[new]
    #[pyo3(signature = (shape, num_classes, seed = 0))]
    fn new(shape: (usize, usize, usize), num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = models::build_task_net([shape.0, shape.1, shape.2], num_classes, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: models::load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        models::save_checkpoint(&self.inner, &path).map_err(err)
    }

    /// SHA-256 over parameter names, shapes and values.
    fn digest(&self) -> PyResult<String> {
        self.inner.digest().map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Arg-max class of every image in `dataset`.
    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<u32>> {
        let ds = &dataset.inner;
        let mut out = Vec::with_capacity(ds.len());
        for chunk in ds.all_indices().chunks(200) {
            let x = ds.images_tensor(chunk).map_err(err)?;
            let logits = self.inner.forward(&x, Mode::Eval).map_err(err)?;
            out.extend(cycada::eval::predictions(&logits).map_err(err)?);
        }
        Ok(out)
    }

    /// Accuracy on `dataset`.
    fn accuracy(&self, dataset: &PyDataset) -> PyResult<f64> {
        Ok(cycada::eval::evaluate(&self.inner, &dataset.inner).map_err(err)?.score())
    }
}

/// Fully resolved config (defaults, file, overrides) as TOML text.
#[pyfunction]
#[pyo3(signature = (path = None, overrides = Vec::new()))]
fn resolve_config(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<String> {
    cycada::config::load_config(path.as_deref(), &overrides).map_err(err)?.to_toml().map_err(err)
}

/// Runs an experiment and returns `{"mean", "stderr", "scores", "aborted"}`.
#[pyfunction]
#[pyo3(signature = (path = None, overrides = Vec::new(), out = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    path: Option<PathBuf>,
    overrides: Vec<String>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = cycada::config::load_config(path.as_deref(), &overrides).map_err(err)?;
    let manifest = py.detach(|| run_exp(&cfg, out.as_deref())).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mean", manifest.aggregate.as_ref().map(|a| a.mean))?;
    d.set_item("stderr", manifest.aggregate.as_ref().and_then(|a| a.stderr))?;
    let scores: Vec<Option<f64>> = manifest.runs.iter().map(|r| r.final_score).collect();
    d.set_item("scores", scores)?;
    let aborted: Vec<u64> = manifest
        .runs
        .iter()
        .filter(|r| matches!(r.status, RunStatus::Aborted { .. }))
        .map(|r| r.seed)
        .collect();
    d.set_item("aborted", aborted)?;
    Ok(d)
}

#[pymodule]
fn cycada_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(task_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gan_loss_discriminator, m)?)?;
    m.add_function(wrap_pyfunction!(gan_loss_generator, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cycada_objective, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyConfusion>()?;
    m.add_class::<PyGate>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTaskNet>()?;
    Ok(())
}
