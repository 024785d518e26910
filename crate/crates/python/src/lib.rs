//! Python module `stgnrde`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stgnrde::checkpoint::Checkpoint;
use stgnrde::config::RunConfig;
use stgnrde::data::SynthSpec;
use stgnrde::logsig::{logsig_polyline, sig_polyline, witt_dimension as witt, LyndonBasis};
use stgnrde::model::Variant;
use stgnrde::path::natural_cubic;
use stgnrde::pipeline::{self, Part};
use stgnrde::solver::{Method, SolveSpec};
use stgnrde::{train as trainer, verify as checks, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::BlowUp { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_obj<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Log-signature of the polyline through `points`, in the Lyndon basis.
#[pyfunction]
fn logsig(points: Vec<Vec<f64>>, depth: usize) -> PyResult<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let basis = LyndonBasis::new(dim, depth).map_err(to_py)?;
    logsig_polyline(&points, &basis).map_err(to_py)
}

/// Signature of the polyline through `points`, one flat list per level.
#[pyfunction]
fn signature(points: Vec<Vec<f64>>, depth: usize) -> PyResult<Vec<Vec<f64>>> {
    let sig = sig_polyline(&points, depth).map_err(to_py)?;
    Ok((1..=depth).map(|k| sig.level(k).to_vec()).collect())
}

/// Bracketed Lyndon basis elements for `dim` letters up to `depth`.
#[pyfunction]
fn lyndon_basis(dim: usize, depth: usize) -> PyResult<Vec<String>> {
    let b = LyndonBasis::new(dim, depth).map_err(to_py)?;
    Ok((0..b.len()).map(|i| b.bracket(i)).collect())
}

#[pyfunction]
fn witt_dimension(dim: usize, depth: usize) -> usize {
    witt(dim, depth)
}

/// Natural cubic spline through `(xs, ys)` evaluated at `query`.
#[pyfunction]
fn spline(xs: Vec<f64>, ys: Vec<f64>, query: Vec<f64>) -> PyResult<Vec<f64>> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PyValueError::new_err("need at least two (x, y) pairs of equal length"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PyValueError::new_err("xs must be strictly increasing"));
    }
    let pieces = natural_cubic(&xs, &ys);
    query
        .iter()
        .map(|&t| {
            if t < xs[0] || t > xs[xs.len() - 1] {
                return Err(PyValueError::new_err(format!("{t} outside [{}, {}]", xs[0], xs[xs.len() - 1])));
            }
            let i = xs.partition_point(|&k| k <= t).saturating_sub(1).min(pieces.len() - 1);
            Ok(pieces[i].value(t - xs[i]))
        })
        .collect()
}

/// Writes `values.csv` and `adjacency.csv` for a synthetic ring graph.
#[pyfunction]
#[pyo3(signature = (nodes, timesteps, seed, out, period=24, noise=0.05, coupling=0.5))]
fn synth(nodes: usize, timesteps: usize, seed: u64, out: PathBuf, period: usize, noise: f64, coupling: f64) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        period,
        noise,
        coupling,
        ..SynthSpec::new(nodes, timesteps, seed)
    };
    spec.write(&out).map_err(to_py)?;
    Ok(out.join("values.csv"))
}

/// MAE, RMSE and MAPE of flat predictions laid out `rows × horizon`.
#[pyfunction]
#[pyo3(signature = (pred, target, horizon=1))]
fn metrics<'py>(py: Python<'py>, pred: Vec<f64>, target: Vec<f64>, horizon: usize) -> PyResult<Bound<'py, PyAny>> {
    let r = trainer::metrics(&pred, &target, horizon, 1).map_err(to_py)?;
    json_obj(py, &r)
}

/// Trains from a preset or config file; returns one report per fold.
#[pyfunction]
#[pyo3(signature = (out, preset=None, config=None, data=None, overrides=Vec::new()))]
fn train<'py>(
    py: Python<'py>,
    out: PathBuf,
    preset: Option<&str>,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    overrides: Vec<(String, String)>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut run = match (config, preset) {
        (Some(p), _) => RunConfig::load(&p),
        (None, Some(name)) => RunConfig::preset(name),
        (None, None) => Ok(RunConfig::default()),
    }
    .map_err(to_py)?;
    if data.is_some() {
        run.data = data;
    }
    for (k, v) in &overrides {
        run.set(k, v).map_err(to_py)?;
    }
    let result = py.detach(|| pipeline::train_and_save(&run, &out)).map_err(to_py)?;
    json_obj(py, &result.folds)
}

/// Worst relative error between taped and finite-difference gradients on
/// a tiny model.
#[pyfunction]
#[pyo3(signature = (variant="full", method="rk4", seed=7))]
fn gradcheck(variant: &str, method: &str, seed: u64) -> PyResult<f64> {
    let variant: Variant = variant.parse().map_err(to_py)?;
    let method: Method = method.parse().map_err(to_py)?;
    let solve = SolveSpec {
        method,
        steps_per_window: 2,
    };
    let r = trainer::gradcheck(&checks::tiny_config(variant), &solve, 6, seed).map_err(to_py)?;
    Ok(r.max_rel_error)
}

/// Runs a verification suite; returns `(suite, name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn verify(suite: &str) -> PyResult<Vec<(String, String, bool, String)>> {
    let suite = suite.parse().map_err(to_py)?;
    let rows = checks::run(suite).map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|c| (c.suite.to_string(), c.name, c.passed, c.detail))
        .collect())
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    ck: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            ck: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ck.save(&path).map_err(to_py)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_obj(py, &self.ck.model.config)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.ck.model.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.ck.model.params.iter().map(|(n, _)| n.clone()).collect()
    }

    /// `(shape, values)` of one parameter tensor.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .ck
            .model
            .params
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter '{name}'")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Learned node-to-node weights, rows summing to one.
    fn adjacency(&self) -> PyResult<Vec<Vec<f64>>> {
        let a = self.ck.model.adjacency().map_err(to_py)?;
        let n = a.shape()[0];
        Ok(a.data().chunks(n).map(<[f64]>::to_vec).collect())
    }

    #[pyo3(signature = (data=None, split="test", fold=0))]
    fn evaluate<'py>(&self, py: Python<'py>, data: Option<PathBuf>, split: &str, fold: usize) -> PyResult<Bound<'py, PyAny>> {
        let part: Part = split.parse().map_err(to_py)?;
        let r = py
            .detach(|| pipeline::evaluate_checkpoint(&self.ck, data.as_deref(), part, fold))
            .map_err(to_py)?;
        json_obj(py, &r)
    }

    /// Forecast CSV text `window,node,horizon,value`.
    #[pyo3(signature = (data=None, split="test", fold=0))]
    fn predict(&self, py: Python<'_>, data: Option<PathBuf>, split: &str, fold: usize) -> PyResult<String> {
        let part: Part = split.parse().map_err(to_py)?;
        py.detach(|| pipeline::predict_checkpoint(&self.ck, data.as_deref(), part, fold))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let c = &self.ck.model.config;
        format!(
            "Model(nodes={}, dim_h={}, dim_z={}, variant={}, parameters={})",
            c.num_nodes,
            c.dim_h,
            c.dim_z,
            c.variant,
            self.ck.model.params.num_scalars()
        )
    }
}

#[pymodule]
#[pyo3(name = "stgnrde")]
fn stgnrde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(logsig, m)?)?;
    m.add_function(wrap_pyfunction!(signature, m)?)?;
    m.add_function(wrap_pyfunction!(lyndon_basis, m)?)?;
    m.add_function(wrap_pyfunction!(witt_dimension, m)?)?;
    m.add_function(wrap_pyfunction!(spline, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
