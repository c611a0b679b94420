//! Python bindings for the beat-matching library.
//!
//! Exposes the `Model` class (build, load, save, predict, train), the
//! synthetic dataset generator, label-scope helpers and hit@k metrics.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use beatx::audio::{labels_for, load_canonical, split_time_units, LabelVector, SignalBuffer};
use beatx::metrics;
use beatx::model::{Model, ModelConfig, ModelKind};
use beatx::scope;
use beatx::synth::{generate_dataset as synth_dataset, SynthSpec};
use beatx::train::{flops_estimate, train_manifest, TrainConfig};

create_exception!(beatx_py, BeatxError, PyException);

fn to_py(e: beatx::Error) -> PyErr {
    BeatxError::new_err(e.to_string())
}

fn label_vector(values: Vec<u8>) -> PyResult<LabelVector> {
    LabelVector::new(values).map_err(to_py)
}

/// Audio-wise averaged metrics in percent, indexed by tolerance k = 0, 1, 2.
#[pyclass(name = "EvalReport", get_all, frozen)]
struct PyEvalReport {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    acc: f64,
    n_audios: usize,
}

impl From<metrics::EvalReport> for PyEvalReport {
    fn from(r: metrics::EvalReport) -> Self {
        Self { precision: r.precision.to_vec(), recall: r.recall.to_vec(), f1: r.f1.to_vec(), acc: r.acc, n_audios: r.n_audios }
    }
}

#[pymethods]
impl PyEvalReport {
    fn __repr__(&self) -> String {
        format!("EvalReport(f1={:?}, acc={:.2}, n_audios={})", self.f1, self.acc, self.n_audios)
    }
}

/// A BeatX network or one of the baselines.
///
/// ```python
/// m = Model("beatx", seed=0)
/// probs = m.predict(samples, 16000)
/// ```
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model. `kind` is one of beatx, linear,
    /// cnn1d, encoder; `preset` is desk or full.
    #[new]
    #[pyo3(signature = (kind = "beatx", seed = 0, preset = "desk"))]
    fn new(kind: &str, seed: u64, preset: &str) -> PyResult<Self> {
        let kind = ModelKind::parse(kind).map_err(to_py)?;
        let cfg = match preset {
            "desk" => ModelConfig::desk(kind),
            "full" => ModelConfig::full(kind),
            other => return Err(BeatxError::new_err(format!("unknown preset `{other}` (desk, full)"))),
        };
        Ok(Self { inner: Model::build(cfg.with_seed(seed)).map_err(to_py)? })
    }

    /// Loads a checkpoint and its `.json` config sidecar.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Model::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.config().kind.name()
    }

    #[getter]
    fn unit_seconds(&self) -> f64 {
        self.inner.config().unit_seconds
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.config().sample_rate
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| BeatxError::new_err(e.to_string()))
    }

    /// Per-unit transition probabilities of a mono waveform.
    fn predict(&self, py: Python<'_>, samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<f32>> {
        let model = &self.inner;
        py.detach(|| {
            let sig = SignalBuffer::new(samples, sample_rate)?;
            let sig = beatx::audio::resample(&sig, model.config().sample_rate)?;
            let seq = split_time_units(&sig, model.config().unit_seconds)?;
            Ok(model.forward(&seq)?.into_vec())
        })
        .map_err(to_py)
    }

    /// Per-unit transition probabilities of a WAV file.
    fn predict_wav(&self, py: Python<'_>, path: PathBuf) -> PyResult<Vec<f32>> {
        let model = &self.inner;
        py.detach(|| {
            let seq = split_time_units(&load_canonical(&path)?, model.config().unit_seconds)?;
            Ok(model.forward(&seq)?.into_vec())
        })
        .map_err(to_py)
    }

    /// Analytic cost of one forward pass over `n_units` units, in GFLOPs.
    fn gflops(&self, n_units: usize) -> PyResult<f64> {
        flops_estimate(self.inner.config(), n_units).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, parameters={})", self.kind(), self.parameter_count())
    }
}

/// Trains a model on a manifest and returns `(model, history)`, where
/// history is a list of per-epoch dicts.
#[pyfunction]
#[pyo3(signature = (manifest, kind = "beatx", epochs = 300, lr = 2e-4, use_scope = true, sigma_hat = 0.9, seed = 0, val_fraction = 0.1))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    kind: &str,
    epochs: usize,
    lr: f32,
    use_scope: bool,
    sigma_hat: f64,
    seed: u64,
    val_fraction: f64,
) -> PyResult<(PyModel, Vec<Py<PyDict>>)> {
    let cfg = TrainConfig {
        epochs,
        lr0: lr,
        use_scope,
        sigma_hat,
        seed,
        val_fraction,
        model: ModelConfig::desk(ModelKind::parse(kind).map_err(to_py)?).with_seed(seed),
        ..TrainConfig::default()
    };
    let (model, history, _) = py.detach(|| train_manifest(&manifest, &cfg)).map_err(to_py)?;
    let rows = history
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("lr", e.lr)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("val_f1", e.val_f1.to_vec())?;
            d.set_item("best", e.best)?;
            Ok(d.unbind())
        })
        .collect::<PyResult<_>>()?;
    Ok((PyModel { inner: model }, rows))
}

/// Writes a synthetic click-track dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_audios = 200, seed = 0))]
fn generate_dataset(py: Python<'_>, out_dir: PathBuf, n_audios: usize, seed: u64) -> PyResult<PathBuf> {
    let spec = SynthSpec { n_audios, seed, ..SynthSpec::default() };
    py.detach(|| synth_dataset(&spec, &out_dir)).map_err(to_py)
}

/// Per-unit labels of cut times (seconds) for `n_units` units.
#[pyfunction]
fn cut_times_to_labels(cut_times_s: Vec<f64>, unit_seconds: f64, n_units: usize, duration_s: f64) -> PyResult<Vec<u32>> {
    let labels = labels_for(&cut_times_s, unit_seconds, n_units, duration_s).map_err(to_py)?;
    Ok(labels.values().iter().map(|&v| u32::from(v)).collect())
}

/// Gaussian label-scope weights; all ones when `labels` has no positive.
#[pyfunction]
#[pyo3(signature = (labels, sigma_hat = scope::DEFAULT_SIGMA))]
fn scope_mask(labels: Vec<u8>, sigma_hat: f64) -> PyResult<Vec<f32>> {
    Ok(scope::scope_mask(&label_vector(labels)?, sigma_hat).map_err(to_py)?.weights().to_vec())
}

#[pyfunction]
#[pyo3(signature = (labels, sigma_hat = scope::DEFAULT_SIGMA))]
fn pn_ratio(labels: Vec<u8>, sigma_hat: f64) -> PyResult<f64> {
    scope::pn_ratio(&label_vector(labels)?, sigma_hat).map_err(to_py)
}

/// Grid point (0.6 to 1.3) whose mean PN ratio is closest to one.
#[pyfunction]
fn estimate_sigma(label_sets: Vec<Vec<u8>>) -> PyResult<f64> {
    let labels = label_sets.into_iter().map(label_vector).collect::<PyResult<Vec<_>>>()?;
    scope::estimate_sigma(&labels, &scope::default_sigma_grid()).map_err(to_py)
}

/// One-to-one hits between truth and prediction within `k` units.
#[pyfunction]
fn match_hits(y: Vec<u8>, y_hat: Vec<u8>, k: usize) -> PyResult<usize> {
    metrics::match_hits(&y, &y_hat, k).map_err(to_py)
}

#[pyfunction]
fn pr_at_k(y: Vec<u8>, y_hat: Vec<u8>, k: usize) -> PyResult<(f64, f64)> {
    metrics::pr_at_k(&y, &y_hat, k).map_err(to_py)
}

/// Thresholds each probability vector and averages metrics over audios.
#[pyfunction]
#[pyo3(signature = (labels, probs, tau = metrics::DEFAULT_TAU))]
fn evaluate(labels: Vec<Vec<u8>>, probs: Vec<Vec<f32>>, tau: f32) -> PyResult<PyEvalReport> {
    if labels.len() != probs.len() {
        return Err(to_py(beatx::Error::LengthMismatch { expected: labels.len(), got: probs.len() }));
    }
    let pairs: Vec<(&[u8], &[f32])> = labels.iter().zip(&probs).map(|(y, p)| (y.as_slice(), p.as_slice())).collect();
    Ok(metrics::evaluate(&pairs, tau).map_err(to_py)?.into())
}

#[pymodule]
pub fn beatx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BeatxError", m.py().get_type::<BeatxError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEvalReport>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cut_times_to_labels, m)?)?;
    m.add_function(wrap_pyfunction!(scope_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pn_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(match_hits, m)?)?;
    m.add_function(wrap_pyfunction!(pr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
