//! Python bindings: templates, orderings, entropy scoring, ranking
//! statistics, dataset loading and the config-driven pipeline.

#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use promptorder_core::dataset::{self, DatasetFormat, LabeledExample, TrainSet};
use promptorder_core::eval::{self, Strategy};
use promptorder_core::experiment::Experiment;
use promptorder_core::permute;
use promptorder_core::rng;
use promptorder_core::scoring;
use promptorder_core::template::{self, PromptTemplate};

create_exception!(promptorder, PromptOrderError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PromptOrderError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import_bound("json")?.call_method1("loads", (text,))?.unbind())
}

/// A prompt template aligned to a label set.
#[pyclass(name = "Template", module = "promptorder")]
#[derive(Clone)]
struct PyTemplate {
    inner: PromptTemplate,
}

#[pymethods]
impl PyTemplate {
    /// Built-in template by id, optionally aligned to dataset label names.
    #[staticmethod]
    #[pyo3(signature = (id, label_names=None))]
    fn preset(id: &str, label_names: Option<Vec<String>>) -> PyResult<Self> {
        let t = template::preset(id).map_err(err)?;
        let inner = match label_names {
            Some(names) => t.aligned_to(&names).map_err(err)?,
            None => t,
        };
        Ok(PyTemplate { inner })
    }

    /// Parse templates from TOML `[[template]]` tables.
    #[staticmethod]
    fn from_toml(source: &str) -> PyResult<Vec<Self>> {
        Ok(template::parse_templates(source).map_err(err)?.into_iter().map(|inner| PyTemplate { inner }).collect())
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn verbalizer(&self) -> Vec<String> {
        self.inner.verbalizer.clone()
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.label_names.clone()
    }

    fn aligned_to(&self, label_names: Vec<String>) -> PyResult<Self> {
        Ok(PyTemplate { inner: self.inner.aligned_to(&label_names).map_err(err)? })
    }

    /// Render a sample; without `label` the text ends at the label prefix.
    #[pyo3(signature = (text_a, label=None, text_b=None))]
    fn linearize(&self, text_a: &str, label: Option<usize>, text_b: Option<&str>) -> PyResult<String> {
        match label {
            Some(label) => {
                let x = LabeledExample {
                    id: String::new(),
                    text_a: text_a.into(),
                    text_b: text_b.map(str::to_string),
                    label,
                };
                self.inner.linearize(&x, true).map_err(err)
            }
            None => self.inner.linearize_unlabeled(text_a, text_b).map_err(err),
        }
    }

    fn concat(&self, parts: Vec<String>) -> String {
        self.inner.concat(&parts)
    }

    /// `(text_a, text_b, label)` for every complete sample in `text`.
    fn extract(&self, text: &str) -> Vec<(String, Option<String>, String)> {
        self.inner.extract(text).into_iter().map(|s| (s.text_a, s.text_b, s.label)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Template({:?})", self.inner.id)
    }
}

#[pyfunction]
fn presets() -> Vec<String> {
    template::presets().into_iter().map(|t| t.id).collect()
}

#[pyfunction]
#[pyo3(signature = (n, cap=24, seed=0))]
fn enumerate_orderings(n: usize, cap: usize, seed: u64) -> Vec<Vec<usize>> {
    permute::enumerate_orderings(n, cap, seed)
}

/// Group orderings by label pattern. `labels[i]` is the label id of sample
/// `i`; `label_names` picks the pattern symbols.
#[pyfunction]
fn label_patterns(
    py: Python<'_>,
    labels: Vec<usize>,
    orderings: Vec<Vec<usize>>,
    label_names: Vec<String>,
) -> PyResult<PyObject> {
    let ts = TrainSet {
        samples: labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| LabeledExample { id: i.to_string(), text_a: String::new(), text_b: None, label })
            .collect(),
        seed: 0,
    };
    if ts.samples.iter().any(|s| s.label >= label_names.len()) {
        return Err(err("label id outside label_names"));
    }
    if orderings.iter().flatten().any(|&i| i >= ts.samples.len()) {
        return Err(err("ordering index outside the sample list"));
    }
    let groups = permute::label_patterns(&ts, &orderings, &permute::label_symbols(&label_names));
    let out = PyDict::new_bound(py);
    for (pattern, members) in groups {
        out.set_item(pattern, members)?;
    }
    Ok(out.into_any().unbind())
}

#[pyfunction]
fn derive_seed(seed: u64, purpose: &str) -> u64 {
    rng::derive_seed(seed, purpose)
}

#[pyfunction]
fn global_entropy(histogram: Vec<usize>) -> PyResult<f64> {
    scoring::global_entropy(&histogram).map_err(err)
}

#[pyfunction]
fn local_entropy(distributions: Vec<Vec<f64>>) -> PyResult<f64> {
    scoring::local_entropy(&distributions).map_err(err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> Vec<f64> {
    promptorder_core::backend::softmax(&scores)
}

/// Indices of the top `k` values, highest first, lowest index on ties.
#[pyfunction]
#[pyo3(signature = (values, k=None))]
fn rank(values: Vec<f64>, k: Option<usize>) -> Vec<usize> {
    let pairs: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    scoring::rank_by_value(&pairs, k.unwrap_or(values.len()))
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&a, &b).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (path, format=None, label_names=None))]
fn load_dataset(
    py: Python<'_>,
    path: PathBuf,
    format: Option<&str>,
    label_names: Option<Vec<String>>,
) -> PyResult<PyObject> {
    let format = match format {
        Some(f) => f.parse::<DatasetFormat>().map_err(err)?,
        None => DatasetFormat::from_path(&path).ok_or_else(|| err("cannot tell the dataset format"))?,
    };
    let d = dataset::load_dataset(&path, format, label_names).map_err(err)?;
    to_py(py, &d)
}

/// Run `select` for an experiment config and return the selection record.
#[pyfunction]
fn select(py: Python<'_>, config: PathBuf) -> PyResult<PyObject> {
    let run = py.allow_threads(|| {
        let exp = Experiment::load(&config)?;
        let backend = exp.backend()?;
        exp.select(&*backend)
    });
    to_py(py, &run.map_err(err)?.selection)
}

/// Run `select` and then `evaluate`; returns the run report.
#[pyfunction]
#[pyo3(signature = (config, strategies=None))]
fn evaluate(py: Python<'_>, config: PathBuf, strategies: Option<Vec<String>>) -> PyResult<PyObject> {
    let strategies = match strategies {
        Some(names) => names.iter().map(|s| s.parse::<Strategy>()).collect::<Result<Vec<_>, _>>().map_err(err)?,
        None => Strategy::ALL.to_vec(),
    };
    let report = py.allow_threads(|| {
        let exp = Experiment::load(&config)?;
        let backend = exp.backend()?;
        let needs = strategies.iter().any(|s| matches!(s, Strategy::GlobalE | Strategy::LocalE));
        let selection = if needs { Some(exp.select(&*backend)?.selection) } else { None };
        exp.evaluate(&*backend, selection.as_ref(), &strategies)
    });
    to_py(py, &report.map_err(err)?)
}

#[pymodule]
fn promptorder(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PromptOrderError", m.py().get_type_bound::<PromptOrderError>())?;
    m.add_class::<PyTemplate>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_orderings, m)?)?;
    m.add_function(wrap_pyfunction!(label_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(global_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(local_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
