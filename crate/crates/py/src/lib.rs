//! Python bindings: certification bounds, energy accounting and explanations
//! of a saved model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fvit_core::certify::{self, Distribution, FaithfulnessParams};
use fvit_core::eval::energy_report;
use fvit_core::explain::{explain, ExplainOptions, MethodId};
use fvit_core::vit::softmax;
use fvit_core::{FvitError, Tensor, ViTParams};

fn py_err(e: FvitError) -> PyErr {
    match e {
        FvitError::Io(_) | FvitError::MissingInput { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dist(v: Vec<f64>) -> PyResult<Distribution> {
    Distribution::new(v).map_err(py_err)
}

#[pyfunction]
fn renyi_divergence(p: Vec<f64>, q: Vec<f64>, alpha: f64) -> PyResult<f64> {
    certify::renyi_divergence(&dist(p)?, &dist(q)?, alpha).map_err(py_err)
}

#[pyfunction]
fn classification_bound(p: Vec<f64>, alpha: f64) -> PyResult<f64> {
    certify::classification_bound(&dist(p)?, alpha).map_err(py_err)
}

#[pyfunction]
fn topk_violation_bound(w: Vec<f64>, k: usize, beta: f64, alpha: f64) -> PyResult<f64> {
    certify::topk_violation_bound(&dist(w)?, k, beta, alpha).map_err(py_err)
}

/// Certificate as a JSON string.
#[pyfunction]
#[pyo3(signature = (sigma, w, p, r = 8.0 / 255.0, alpha = 2.0, gamma = 0.1, beta = 0.55, k = 10))]
#[allow(clippy::too_many_arguments)]
fn certify_faithful(sigma: f64, w: Vec<f64>, p: Vec<f64>, r: f64, alpha: f64, gamma: f64, beta: f64, k: usize) -> PyResult<String> {
    let fp = FaithfulnessParams { r, alpha, gamma, beta, k };
    let cert = certify::certify_faithful(sigma, &dist(w)?, &dist(p)?, &fp).map_err(py_err)?;
    serde_json::to_string(&cert).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `(kwh, grams_co2)` of a run.
#[pyfunction]
#[pyo3(signature = (seconds, watts = fvit_core::eval::DEFAULT_WATTS, grid_factor = fvit_core::eval::DEFAULT_GRID_FACTOR))]
fn energy(seconds: f64, watts: f64, grid_factor: f64) -> PyResult<(f64, f64)> {
    let r = energy_report(seconds, watts, grid_factor).map_err(py_err)?;
    Ok((r.kwh, r.grams_co2))
}

/// A trained model loaded from `<stem>.fvt` and `<stem>.json`.
#[pyclass]
struct Model {
    params: ViTParams,
}

impl Model {
    fn image(&self, pixels: Vec<f64>) -> PyResult<Tensor> {
        Tensor::new(self.params.config().image_shape().to_vec(), pixels).map_err(py_err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(stem: PathBuf) -> PyResult<Self> {
        Ok(Model { params: ViTParams::load(&stem).map_err(py_err)? })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.params.config().image_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params.config().num_classes
    }

    /// Class probabilities of a flattened `[C, H, W]` image.
    fn predict(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let trace = self.params.forward(&self.image(pixels)?).map_err(py_err)?;
        Ok(softmax(trace.logits.data()))
    }

    /// Token scores of `method` for `class` (the predicted class by default).
    #[pyo3(signature = (pixels, method, class = None))]
    fn explain(&self, pixels: Vec<f64>, method: &str, class: Option<usize>) -> PyResult<Vec<f64>> {
        let method: MethodId = method.parse().map_err(py_err)?;
        let map = explain(&self.params, &self.image(pixels)?, method, class, &ExplainOptions::default()).map_err(py_err)?;
        Ok(map.token_scores)
    }
}

#[pymodule]
fn fvit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(renyi_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(classification_bound, m)?)?;
    m.add_function(wrap_pyfunction!(topk_violation_bound, m)?)?;
    m.add_function(wrap_pyfunction!(certify_faithful, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
