//! Python bindings: run the training loop, score segments and use the
//! preference algebra from Python.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use prefrl_core::annotation::{self, Annotator, RawLabel};
use prefrl_core::io::{self, RunConfig};
use prefrl_core::lapp_loop::LoopState;
use prefrl_core::preference::{self, TrajectorySegment};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(runtime_err)?)
}

/// Default run configuration as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml().map_err(value_err)
}

/// P(a preferred over b) from two segment returns.
#[pyfunction]
fn bt_probability(return_a: f64, return_b: f64) -> f64 {
    preference::bt_probability(return_a, return_b)
}

#[pyfunction]
fn adjust_probability(p: f64, noise_rate: f64) -> PyResult<f64> {
    preference::adjust_probability(p, noise_rate).map_err(value_err)
}

/// Noise-adjusted cross entropy of one labeled pair.
#[pyfunction]
fn pair_loss(return_a: f64, return_b: f64, label: f64, noise_rate: f64) -> PyResult<f64> {
    preference::pair_loss(return_a, return_b, label, noise_rate).map_err(value_err)
}

/// Raw labels 0..=3 from an annotator reply.
#[pyfunction]
fn parse_labels(reply: &str, expected: usize) -> PyResult<Vec<u32>> {
    Ok(annotation::parse_label_list(reply, expected)
        .map_err(value_err)?
        .into_iter()
        .map(|r| u32::from(r.value()))
        .collect())
}

/// Most frequent raw label; ties go to 2 ("equal").
#[pyfunction]
fn aggregate_mode(samples: Vec<i64>) -> PyResult<Option<u8>> {
    let raw = samples
        .into_iter()
        .map(RawLabel::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    Ok(annotation::aggregate_mode(&raw).map(RawLabel::value))
}

/// Preference probability target for a raw label, or None when discarded.
#[pyfunction]
fn map_label(raw: i64) -> PyResult<Option<f64>> {
    Ok(annotation::map_label(RawLabel::new(raw).map_err(value_err)?))
}

/// A training run: policy, environments, predictor ensemble and datasets.
#[pyclass(unsendable)]
struct Run {
    state: LoopState,
    annotator: Annotator,
}

#[pymethods]
impl Run {
    /// Starts a fresh run from TOML text (empty text means all defaults).
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config).map_err(value_err)?;
        Self::build(LoopState::new(cfg).map_err(value_err)?)
    }

    /// Resumes a run from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::build(io::load_state(&path).map_err(runtime_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_state(&path, &self.state).map_err(runtime_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        self.state.config.to_toml().map_err(runtime_err)
    }

    #[getter]
    fn has_predictor(&self) -> bool {
        self.state.predictor.is_some()
    }

    /// Labels the initial pairs and trains the first predictor.
    fn bootstrap<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.state.bootstrap(&self.annotator).map_err(runtime_err)?;
        json_to_py(py, &report)
    }

    /// One epoch; returns its metrics row as a dict.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let labeler = (!self.state.config.run.baseline).then_some(&self.annotator as _);
        let row = self.state.run_epoch(labeler).map_err(runtime_err)?;
        json_to_py(py, &row)
    }

    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let m = self.state.evaluate_now().map_err(runtime_err)?;
        json_to_py(py, &m)
    }

    /// Per-step ensemble rewards for a segment given as
    /// `{channel: [[value, ...], ...]}` plus optional actions.
    #[pyo3(signature = (channels, actions = None))]
    fn predict(
        &self,
        channels: BTreeMap<String, Vec<Vec<f64>>>,
        actions: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<f64>> {
        let predictor = self
            .state
            .predictor
            .as_ref()
            .ok_or_else(|| runtime_err("no predictor yet; call bootstrap() first"))?;
        let segment = TrajectorySegment::new(channels, actions.unwrap_or_default(), 0, 0).map_err(value_err)?;
        predictor.predict(&segment).map_err(value_err)
    }
}

impl Run {
    fn build(state: LoopState) -> PyResult<Self> {
        let annotator = Annotator::from_config(&state.config.annotator).map_err(value_err)?;
        Ok(Self { state, annotator })
    }
}

#[pymodule]
fn prefrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(adjust_probability, m)?)?;
    m.add_function(wrap_pyfunction!(pair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(parse_labels, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_mode, m)?)?;
    m.add_function(wrap_pyfunction!(map_label, m)?)?;
    m.add_class::<Run>()?;
    Ok(())
}
