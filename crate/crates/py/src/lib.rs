//! Python bindings: build flows, run experiments, reload trained models.
//!
//! Arrays cross the boundary as nested lists of floats; batched calls take
//! one time per row.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nflows::data::{gen_tpp, Split, TppKind};
use nflows::experiment::{train, ExperimentConfig, ExperimentData, ModelFile};
use nflows::flows::{Architecture, EmbeddingKind, FlowSpec, FlowStack, InverseConfig};
use nflows::{Error, ParamSet, Tensor};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() || matches!(e, Error::Invalid(_) | Error::Shape { .. }) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("need at least one row"));
    }
    Tensor::from_rows(rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

fn parse_embedding(s: &str) -> PyResult<EmbeddingKind> {
    let value = if s.trim_start().starts_with('{') {
        serde_json::from_str(s)
    } else {
        serde_json::from_value(serde_json::json!({ "type": s }))
    };
    value.map_err(|e| PyValueError::new_err(format!("embedding: {e}")))
}

/// A stack of flow layers with its own parameters.
#[pyclass(name = "Flow", module = "nflows")]
struct PyFlow {
    flow: FlowStack,
    params: ParamSet,
}

#[pymethods]
impl PyFlow {
    /// `architecture` is resnet, gru, coupling or linear. `embedding` is a
    /// name (linear, tanh_linear) or a JSON object such as
    /// `{"type": "fourier", "features": 8, "bounded": true}`.
    #[new]
    #[pyo3(signature = (architecture, dim, layers = 1, hidden = vec![64, 64], embedding = None, seed = 0))]
    fn new(
        architecture: &str,
        dim: usize,
        layers: usize,
        hidden: Vec<usize>,
        embedding: Option<&str>,
        seed: u64,
    ) -> PyResult<Self> {
        let arch: Architecture = serde_json::from_value(serde_json::json!(architecture))
            .map_err(|_| PyValueError::new_err(format!("unknown architecture `{architecture}`")))?;
        let mut spec = FlowSpec::new(arch, dim, layers).hidden(hidden);
        if let Some(e) = embedding {
            spec = spec.embedding(parse_embedding(e)?);
        }
        let mut params = ParamSet::new();
        let mut rng = nflows::data::rng_for(seed, 10);
        let flow = FlowStack::new(&mut params, "flow", &spec, &mut rng).map_err(py_err)?;
        Ok(Self { flow, params })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.flow.dim
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// `F(t_i, x_i)` for every row.
    fn forward(&self, t: Vec<f64>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let y = self.flow.eval(&self.params, &t, &to_tensor(&x)?).map_err(py_err)?;
        Ok(to_rows(&y))
    }

    /// `F⁻¹(t_i, y_i)` for every row.
    #[pyo3(signature = (t, y, tol = 1e-10, max_iter = 500))]
    fn inverse(&self, t: Vec<f64>, y: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> PyResult<Vec<Vec<f64>>> {
        let cfg = InverseConfig { tol, max_iter };
        let x = self.flow.eval_inverse(&self.params, &t, &to_tensor(&y)?, cfg).map_err(py_err)?;
        Ok(to_rows(&x))
    }

    fn to_json(&self) -> String {
        serde_json::json!({ "flow": self.flow, "params": self.params }).to_string()
    }

    fn __repr__(&self) -> String {
        format!("Flow(dim={}, layers={}, params={})", self.flow.dim, self.flow.layers.len(), self.num_params())
    }
}

/// A model saved by `train` (or the CLI's `model.json`).
#[pyclass(name = "TrainedModel", module = "nflows")]
struct PyTrainedModel {
    file: ModelFile,
}

#[pymethods]
impl PyTrainedModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { file: ModelFile::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.file.to_json()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.file.model.kind_name()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.file.config_hash.clone()
    }

    /// Loss on `split` of the dataset regenerated from the stored config.
    #[pyo3(signature = (split = "test"))]
    fn evaluate(&self, split: &str) -> PyResult<f64> {
        let split = Split::parse(split).ok_or_else(|| PyValueError::new_err(format!("unknown split `{split}`")))?;
        let cfg = &self.file.config;
        let data = ExperimentData::generate(&cfg.dataset, cfg.seed).map_err(py_err)?;
        let r = self.file.model.evaluate(&self.file.params, &data, split, cfg.seed).map_err(py_err)?;
        Ok(r.loss)
    }

    /// Predicted states for trajectory models; `start` defaults to zeros.
    #[pyo3(signature = (t, x0, start = None))]
    fn predict(&self, t: Vec<f64>, x0: Vec<Vec<f64>>, start: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let start = start.unwrap_or_else(|| vec![0.0; t.len()]);
        let (y, _) = self.file.model.predict(&self.file.params, &start, &t, &to_tensor(&x0)?).map_err(py_err)?;
        Ok(to_rows(&y))
    }

    /// `log p(x_i, t_i)` for density models.
    fn log_density(&self, x: Vec<Vec<f64>>, t: Vec<f64>) -> PyResult<Vec<f64>> {
        self.file.model.density_values(&self.file.params, &to_tensor(&x)?, &t).map_err(py_err)
    }
}

/// Validates a config and returns its hash.
#[pyfunction]
fn validate_config(config: &str) -> PyResult<String> {
    Ok(ExperimentConfig::from_json(config).map_err(py_err)?.hash())
}

/// Generates the config's dataset; returns `(rows, sha256)` of its file encoding.
#[pyfunction]
fn generate(config: &str) -> PyResult<(usize, String)> {
    let cfg = ExperimentConfig::from_json(config).map_err(py_err)?;
    let ds = ExperimentData::generate(&cfg.dataset, cfg.seed).map_err(py_err)?.to_dataset();
    Ok((ds.row_count(), nflows::data::io::sha256_hex(&nflows::data::io::encode(&ds))))
}

/// Trains a config; returns the report as JSON and the trained model.
#[pyfunction(name = "train")]
fn train_py(py: Python<'_>, config: &str) -> PyResult<(String, PyTrainedModel)> {
    let cfg = ExperimentConfig::from_json(config).map_err(py_err)?;
    let out = py
        .detach(|| {
            let data = ExperimentData::generate(&cfg.dataset, cfg.seed)?;
            train(&cfg, &data, 0.0)
        })
        .map_err(py_err)?;
    let file = ModelFile::new(&cfg, out.model, out.params);
    Ok((out.report.to_json(), PyTrainedModel { file }))
}

/// Ground-truth NLL per event of a synthetic point process.
#[pyfunction]
#[pyo3(signature = (process, n_seq = 1000, seq_len = 100, seed = 0))]
fn tpp_ground_truth(process: &str, n_seq: usize, seq_len: usize, seed: u64) -> PyResult<f64> {
    let kind = TppKind::by_name(process).ok_or_else(|| PyValueError::new_err(format!("unknown process `{process}`")))?;
    let ds = gen_tpp(&kind, n_seq, seq_len, seed).map_err(py_err)?;
    ds.per_event_nll().ok_or_else(|| PyRuntimeError::new_err("generator returned no NLL"))
}

#[pyfunction]
fn matrix_exp(a: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&nflows::flows::matrix_exp(&to_tensor(&a)?).map_err(py_err)?))
}

/// Exact solution of the stiff test problem.
#[pyfunction]
fn stiff_reference(t: f64) -> f64 {
    nflows::ode::stiff_reference(t)
}

#[pymodule]
#[pyo3(name = "nflows")]
pub fn nflows_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlow>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(tpp_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(matrix_exp, m)?)?;
    m.add_function(wrap_pyfunction!(stiff_reference, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
