//! Python bindings: architectures, inference, weights files, splits and
//! metrics. Structured results cross over as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ulsqueeze::arch::{self, ArchSpec};
use ulsqueeze::data::{self, SplitManifest};
use ulsqueeze::metrics::{auc, roc_points, MetricsReport};
use ulsqueeze::training::Prediction;
use ulsqueeze::{ArchId, Error, Tensor4};

const SIDE: usize = 130;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Ingestion { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn arch_id(name: &str) -> PyResult<ArchId> {
    name.parse().map_err(to_py)
}

fn to_dict(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Exact trainable-parameter count of a named architecture.
#[pyfunction]
fn count_trainable_params(arch: &str) -> PyResult<usize> {
    Ok(arch::count_trainable_params(&ArchSpec::for_arch(arch_id(arch)?)))
}

/// Count with its 4-byte storage size, e.g. "13458 (52.57 KB)".
#[pyfunction]
fn count_params_line(arch: &str) -> PyResult<String> {
    Ok(ulsqueeze::cli::count_params_line(arch_id(arch)?))
}

/// Per-layer table as a dict.
#[pyfunction]
fn summary(py: Python<'_>, arch: &str) -> PyResult<Py<PyAny>> {
    let s = arch::summary(&ArchSpec::for_arch(arch_id(arch)?)).map_err(to_py)?;
    to_dict(py, &s)
}

/// A float32 network at the standard 130×130 RGB input.
#[pyclass(name = "Network")]
struct PyNetwork {
    inner: ulsqueeze::Network<f32>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch, seed = 0))]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: arch::build(arch, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ulsqueeze::model_io::load_weights(path).map_err(to_py)?,
        })
    }

    /// Writes the weights file; returns its size in bytes.
    fn save(&self, path: PathBuf) -> PyResult<usize> {
        ulsqueeze::model_io::save_weights(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.spec().id.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Parameter tensors as (name, flat values) pairs, canonical order.
    fn tensors(&self) -> Vec<(String, Vec<f32>)> {
        self.inner
            .tensors()
            .into_iter()
            .map(|(n, v)| (n, v.to_vec()))
            .collect()
    }

    /// Class probabilities for flat NHWC pixels (n × 130 × 130 × 3, values
    /// in [0, 1]). Returns one [parasitized, uninfected] pair per image.
    fn predict(&self, pixels: Vec<f32>) -> PyResult<Vec<[f32; 2]>> {
        let per = SIDE * SIDE * 3;
        if pixels.is_empty() || pixels.len() % per != 0 {
            return Err(PyValueError::new_err(format!(
                "expected a multiple of {per} values, got {}",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        let batch = Tensor4::new([n, SIDE, SIDE, 3], pixels).map_err(to_py)?;
        let probs = self.inner.predict(&batch).map_err(to_py)?;
        Ok(probs.data().chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    /// P(parasitized) for image files after the standard preprocessing.
    fn predict_files(&self, paths: Vec<PathBuf>) -> PyResult<Vec<f32>> {
        let records = paths
            .iter()
            .map(|p| data::load_pixels(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?;
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Tensor4::stack(&records).map_err(to_py)?;
        let probs = self.inner.predict(&batch).map_err(to_py)?;
        Ok(probs.data().chunks(2).map(|p| p[0]).collect())
    }

    fn __repr__(&self) -> String {
        format!("Network(arch={:?}, params={})", self.arch(), self.param_count())
    }
}

/// Metrics report from true labels, predicted labels and P(parasitized)
/// scores. Class 0 is parasitized.
#[pyfunction]
fn metrics_report(
    py: Python<'_>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    scores: Vec<f64>,
) -> PyResult<Py<PyAny>> {
    if truth.len() != predicted.len() || truth.len() != scores.len() {
        return Err(PyValueError::new_err("truth, predicted and scores differ in length"));
    }
    let preds: Vec<Prediction> = truth
        .into_iter()
        .zip(predicted)
        .zip(scores)
        .map(|((truth, predicted), score)| Prediction {
            truth,
            predicted,
            score,
        })
        .collect();
    let report = MetricsReport::from_predictions(&preds).map_err(to_py)?;
    to_dict(py, &report)
}

/// Area under the ROC curve; `positives[i]` marks a parasitized sample.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, positives: Vec<bool>) -> PyResult<f64> {
    Ok(auc(&roc_points(&scores, &positives).map_err(to_py)?))
}

/// Stratified split of a class-per-directory dataset, as a manifest dict.
#[pyfunction]
#[pyo3(signature = (root, val_frac = 0.2, seed = 0))]
fn stratified_split(py: Python<'_>, root: PathBuf, val_frac: f64, seed: u64) -> PyResult<Py<PyAny>> {
    let samples = data::scan_dataset(&root).map_err(to_py)?;
    let split = data::stratified_split(&samples, val_frac, seed).map_err(to_py)?;
    to_dict(py, &SplitManifest::from_split(&root, &split))
}

/// Worst relative gradient error on a reduced input.
#[pyfunction]
#[pyo3(signature = (arch, size = 16, epsilon = 1e-5, seed = 0))]
fn grad_check(arch: &str, size: usize, epsilon: f64, seed: u64) -> PyResult<f64> {
    let spec = ArchSpec::for_arch(arch_id(arch)?).with_input_size(size);
    let net = ulsqueeze::Network::<f64>::init(spec, seed).map_err(to_py)?;
    let (x, labels) = ulsqueeze::cli::random_batch(2, size, seed);
    Ok(ulsqueeze::grad_check(&net, &x, &labels, epsilon)
        .map_err(to_py)?
        .max_relative_error)
}

#[pymodule]
#[pyo3(name = "ulsqueeze")]
fn ulsqueeze_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(count_trainable_params, m)?)?;
    m.add_function(wrap_pyfunction!(count_params_line, m)?)?;
    m.add_function(wrap_pyfunction!(summary, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_report, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_split, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("ARCHITECTURES", ArchId::ALL.iter().map(|a| a.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
