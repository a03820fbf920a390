//! Python bindings for the FedIN simulator.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use fedin_core::config::{parse_config, parse_config_str, ExperimentConfig};
use fedin_core::grad::{GradientSet, Group, Layout};
use fedin_core::harness;
use fedin_core::model::{ArchSpec, ModelKind};
use fedin_core::partition::{self, PartitionSpec};
use fedin_core::protocol::{Federation, RoundMetrics};
use fedin_core::{checkpoint, data, resolve, Error, Tensor, Variant};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn pair(g_in: Vec<f64>, g_local: Vec<f64>) -> PyResult<(GradientSet, GradientSet)> {
    if g_in.len() != g_local.len() {
        return Err(PyValueError::new_err(format!(
            "gradients differ in length: {} vs {}",
            g_in.len(),
            g_local.len()
        )));
    }
    let layout = Arc::new(Layout::flat(Group::Intermediate, g_in.len()));
    let mk = |v| GradientSet::from_groups(layout.clone(), [Vec::new(), v, Vec::new()]).map_err(py_err);
    Ok((mk(g_in)?, mk(g_local)?))
}

/// Closed-form projection of `g_in` onto the half-space `<z, g_local> >= 0`.
#[pyfunction]
fn resolve_analytic(g_in: Vec<f64>, g_local: Vec<f64>) -> PyResult<Vec<f64>> {
    let (a, b) = pair(g_in, g_local)?;
    Ok(resolve::resolve_analytic(&a, &b).map_err(py_err)?.to_flat())
}

/// `g_in + (lam / 2) g_local`.
#[pyfunction]
#[pyo3(signature = (g_in, g_local, lam = resolve::DEFAULT_LAMBDA))]
fn resolve_simplified(g_in: Vec<f64>, g_local: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let (a, b) = pair(g_in, g_local)?;
    Ok(resolve::resolve_simplified(&a, &b, lam).map_err(py_err)?.to_flat())
}

#[pyfunction]
fn projection_oracle(g_in: Vec<f64>, g_local: Vec<f64>) -> PyResult<Vec<f64>> {
    let (a, b) = pair(g_in, g_local)?;
    Ok(resolve::projection_oracle(&a, &b).map_err(py_err)?.to_flat())
}

/// `(lambda*, g(lambda*))` of the dual problem.
#[pyfunction]
fn dual_optimum(g_in: Vec<f64>, g_local: Vec<f64>) -> PyResult<(f64, f64)> {
    let (a, b) = pair(g_in, g_local)?;
    resolve::dual_optimum(&a, &b).map_err(py_err)
}

#[pyfunction]
fn frobenius_inner(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let (a, b) = pair(a, b)?;
    resolve::frobenius_inner(&a, &b).map_err(py_err)
}

fn rows_to_tensor(rows: &[Vec<f32>]) -> PyResult<Tensor<f32>> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn tensor_to_rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n, num_classes, dim, spread, seed = 0))]
    fn synth_blobs(n: usize, num_classes: usize, dim: usize, spread: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::synth_blobs(n, num_classes, dim, spread, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_idx(images: &str, labels: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_idx(images, labels).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape().to_vec()
    }

    /// Samples as flat rows.
    fn inputs(&self) -> Vec<Vec<f32>> {
        tensor_to_rows(&self.inner.flattened().inputs().clone())
    }

    /// Client shards; `kind` is "iid" or "dirichlet".
    #[pyo3(signature = (num_clients, kind = "dirichlet", alpha = 0.5, seed = 0))]
    fn partition(&self, num_clients: usize, kind: &str, alpha: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let spec = match kind {
            "iid" => PartitionSpec::iid(num_clients, seed),
            "dirichlet" => PartitionSpec::dirichlet(alpha, num_clients, seed),
            other => return Err(PyValueError::new_err(format!("unknown partition kind {other:?}"))),
        };
        partition::partition(&self.inner, &spec).map_err(py_err)
    }
}

#[pyclass(name = "SplitModel")]
struct PySplitModel {
    inner: fedin_core::SplitModel<f32>,
}

#[pymethods]
impl PySplitModel {
    #[staticmethod]
    #[pyo3(signature = (variant, input_dim, num_classes, hidden = 64, seed = 0))]
    fn mlp(variant: &str, input_dim: usize, num_classes: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(py_err)?;
        let arch = ArchSpec::for_kind(&ModelKind::Mlp { hidden }, v, &[input_dim], num_classes).map_err(py_err)?;
        Ok(Self {
            inner: fedin_core::build_model(&arch, seed),
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.arch().variant.to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn feature_dims(&self) -> (usize, usize) {
        (self.inner.arch().feature_dim_in, self.inner.arch().feature_dim_out)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.all_params().map(|p| p.name.clone()).collect()
    }

    /// `(logits, s_in, s_out)` for a batch of flat rows.
    fn forward(&self, x: Vec<Vec<f32>>) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let cap = self.inner.forward_full(&rows_to_tensor(&x)?).map_err(py_err)?;
        Ok((tensor_to_rows(&cap.logits), tensor_to_rows(&cap.s_in), tensor_to_rows(&cap.s_out)))
    }

    /// Cross-entropy loss and its gradient per parameter name.
    fn local_gradients(&self, x: Vec<Vec<f32>>, labels: Vec<usize>) -> PyResult<(f32, BTreeMap<String, Vec<f64>>)> {
        let pass = self.inner.local_pass(&rows_to_tensor(&x)?, &labels).map_err(py_err)?;
        let grads = pass
            .grads
            .layout()
            .entries()
            .iter()
            .map(|e| (e.name.clone(), pass.grads.param(&e.name).unwrap_or_default().to_vec()))
            .collect();
        Ok((pass.loss, grads))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save_model(&self.inner, path).map_err(py_err)
    }

    fn load(&mut self, path: &str) -> PyResult<()> {
        self.inner = checkpoint::load_model(self.inner.arch(), path).map_err(py_err)?;
        Ok(())
    }
}

fn metrics_dict(m: &RoundMetrics) -> BTreeMap<&'static str, PyMetric> {
    BTreeMap::from([
        ("round", PyMetric::Int(m.round)),
        ("mean_accuracy", PyMetric::Float(m.mean_accuracy)),
        ("mean_local_loss", PyMetric::Float(m.mean_local_loss)),
        ("mean_in_loss", PyMetric::Opt(m.mean_in_loss)),
        ("elapsed_seconds", PyMetric::Float(m.elapsed_seconds)),
        ("per_client_accuracy", PyMetric::List(m.per_client_accuracy.clone())),
    ])
}

#[derive(IntoPyObject)]
enum PyMetric {
    Int(usize),
    Float(f64),
    Opt(Option<f64>),
    List(Vec<f64>),
}

/// A configured federation that advances one round at a time.
#[pyclass(name = "Simulation")]
struct PySimulation {
    config: ExperimentConfig,
    federation: Federation,
}

#[pymethods]
impl PySimulation {
    /// Builds from a JSON config string.
    #[new]
    #[pyo3(signature = (config_json, seed = None, mode = None))]
    fn new(config_json: &str, seed: Option<u64>, mode: Option<&str>) -> PyResult<Self> {
        Self::build(parse_config_str(config_json).map_err(py_err)?, seed, mode)
    }

    #[staticmethod]
    #[pyo3(signature = (path, seed = None, mode = None))]
    fn from_file(path: &str, seed: Option<u64>, mode: Option<&str>) -> PyResult<Self> {
        Self::build(parse_config(path).map_err(py_err)?, seed, mode)
    }

    #[getter]
    fn round(&self) -> usize {
        self.federation.state().round
    }

    #[getter]
    fn mode(&self) -> String {
        self.config.mode.to_string()
    }

    #[getter]
    fn num_rounds(&self) -> usize {
        self.config.num_rounds
    }

    fn run_round(&mut self, py: Python<'_>) -> PyResult<BTreeMap<&'static str, PyMetric>> {
        let fed = &mut self.federation;
        let m = py.detach(|| fed.run_round()).map_err(py_err)?;
        Ok(metrics_dict(&m))
    }

    fn client_model(&self, client: usize) -> PyResult<PySplitModel> {
        let c = self
            .federation
            .clients()
            .get(client)
            .ok_or_else(|| PyValueError::new_err(format!("no client {client}")))?;
        Ok(PySplitModel { inner: c.model.clone() })
    }

    fn config_json(&self) -> String {
        self.config.to_json()
    }
}

impl PySimulation {
    fn build(mut config: ExperimentConfig, seed: Option<u64>, mode: Option<&str>) -> PyResult<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(m) = mode {
            config.mode = m.parse().map_err(py_err)?;
        }
        let threads = harness::threads_from_env().map_err(py_err)?;
        let federation = harness::build_federation(&config, threads).map_err(py_err)?;
        Ok(Self { config, federation })
    }
}

/// Per-round deltas `(round, b - a)` plus the last-10 summary.
#[pyfunction]
fn compare_runs(csv_a: &str, csv_b: &str) -> PyResult<(Vec<(usize, f64)>, f64, f64, f64)> {
    let c = harness::compare_runs(csv_a, csv_b).map_err(py_err)?;
    Ok((c.deltas, c.last10_a, c.last10_b, c.last10_delta))
}

/// `(name, value, threshold, passed)` for each self check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn check_grads(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let results = py.detach(|| harness::check_grads(seed)).map_err(py_err)?;
    Ok(results.into_iter().map(|r| (r.name, r.value, r.threshold, r.passed)).collect())
}

#[pymodule]
fn fedin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resolve_analytic, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_simplified, m)?)?;
    m.add_function(wrap_pyfunction!(projection_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(dual_optimum, m)?)?;
    m.add_function(wrap_pyfunction!(frobenius_inner, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_function(wrap_pyfunction!(check_grads, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySplitModel>()?;
    m.add_class::<PySimulation>()?;
    Ok(())
}
