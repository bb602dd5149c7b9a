//! Python bindings: datasets, text serialization, vocabularies, the encoder
//! regressor and pair statistics.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use adtext_core::checkpoint::{load_checkpoint, save_checkpoint};
use adtext_core::encoder::{EncoderConfig, EncoderModel};
use adtext_core::eval::{eval_report, PredictionRecord};
use adtext_core::featurize::{featurize as core_featurize, SerializedSample, TextFormat, DEFAULT_CUTOFF_TOLERANCE};
use adtext_core::synth::{generate, SynthConfig};
use adtext_core::system::{load_dataset as core_load, AtomicSystem, Split};
use adtext_core::tokenizer::{build_vocab, encode, Vocabulary as CoreVocab};
use adtext_core::train::{train_regression, TrainRunConfig};

fn err(e: adtext_core::Error) -> PyErr {
    use adtext_core::Error as E;
    match e {
        E::Shape(_) | E::NonFiniteGradient(_) | E::AttentionNotCaptured | E::UnassignedToken(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
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
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// One adsorbate-on-slab structure.
#[pyclass(name = "System", frozen)]
struct PySystem {
    inner: AtomicSystem,
}

#[pymethods]
impl PySystem {
    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }
    #[getter]
    fn adsorbate_smiles(&self) -> &str {
        &self.inner.adsorbate_smiles
    }
    #[getter]
    fn bulk_formula(&self) -> &str {
        &self.inner.bulk_formula
    }
    #[getter]
    fn miller_index(&self) -> (i32, i32, i32) {
        let [h, k, l] = self.inner.miller_index;
        (h, k, l)
    }
    #[getter]
    fn energy_ev(&self) -> Option<f64> {
        self.inner.energy_ev
    }
    #[getter]
    fn split(&self) -> &'static str {
        self.inner.split.as_str()
    }
    fn n_atoms(&self) -> usize {
        self.inner.atoms.len()
    }
    /// Serialize in one of S1..S5 or DESC.
    #[pyo3(signature = (format = "S4", tolerance = DEFAULT_CUTOFF_TOLERANCE, fallback = false))]
    fn featurize(&self, format: &str, tolerance: f64, fallback: bool) -> PyResult<String> {
        let format: TextFormat = format.parse().map_err(err)?;
        Ok(core_featurize(&self.inner, format, tolerance, fallback).map_err(err)?.text)
    }
    fn __repr__(&self) -> String {
        format!("System({:?}, {} on {})", self.inner.id, self.inner.adsorbate_smiles, self.inner.bulk_formula)
    }
}

fn wrap(systems: Vec<AtomicSystem>) -> Vec<PySystem> {
    systems.into_iter().map(|inner| PySystem { inner }).collect()
}

/// Read a JSON-lines systems file.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PySystem>> {
    Ok(wrap(core_load(path).map_err(err)?))
}

/// Generate a labelled synthetic dataset.
#[pyfunction]
#[pyo3(signature = (n = 2000, noise = 0.1, val_fraction = 0.2, seed = 0))]
fn synth(n: usize, noise: f64, val_fraction: f64, seed: u64) -> PyResult<Vec<PySystem>> {
    let cfg = SynthConfig {
        n_systems: n,
        noise_sigma: noise,
        val_fraction,
        seed,
        mixed_validation_splits: false,
    };
    Ok(wrap(generate(&cfg).map_err(err)?))
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocab {
    inner: CoreVocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (texts, min_freq = 1))]
    fn build(texts: Vec<String>, min_freq: usize) -> PyResult<Self> {
        Ok(Self {
            inner: build_vocab(texts.iter().map(String::as_str), min_freq).map_err(err)?,
        })
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreVocab::load(path).map_err(err)?,
        })
    }
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }
    fn hash(&self) -> String {
        self.inner.hash()
    }
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }
    /// Token ids and attention mask, padded to `max_positions`.
    #[pyo3(signature = (text, max_positions = 512))]
    fn encode(&self, text: &str, max_positions: usize) -> PyResult<(Vec<u32>, Vec<u8>)> {
        if max_positions < 2 {
            return Err(PyValueError::new_err("max_positions must be at least 2"));
        }
        let seq = encode(text, &self.inner, max_positions);
        Ok((seq.ids, seq.attention_mask))
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn samples(texts: Vec<String>, labels: Vec<f64>, split: Split) -> PyResult<Vec<SerializedSample>> {
    if texts.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} texts but {} labels", texts.len(), labels.len())));
    }
    Ok(texts
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (text, y))| SerializedSample {
            system_id: format!("{}_{i}", split.as_str()),
            format: TextFormat::S4,
            text,
            energy_ev: Some(y),
            split,
        })
        .collect())
}

/// Transformer encoder with a scalar regression head.
#[pyclass(name = "Model")]
struct PyModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, layers = 4, heads = 4, hidden = 64, max_positions = 512, dropout = 0.1, seed = 0))]
    fn new(
        vocab_size: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        max_positions: usize,
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = EncoderConfig::desk(vocab_size);
        cfg.n_layers = layers;
        cfg.n_heads = heads;
        cfg.hidden_size = hidden;
        cfg.ffn_size = 4 * hidden;
        cfg.max_positions = max_positions;
        cfg.dropout_rate = dropout;
        let inner = EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path, None).map_err(err)?.0,
        })
    }

    fn save(&self, path: PathBuf, vocab: &PyVocab) -> PyResult<()> {
        save_checkpoint(&self.inner, path, &vocab.inner.hash(), 0, 0).map_err(err)
    }

    fn n_parameters(&self) -> usize {
        self.inner.n_parameters()
    }

    fn predict(&self, py: Python<'_>, vocab: &PyVocab, texts: Vec<String>) -> PyResult<Vec<f64>> {
        let max = self.inner.config.max_positions;
        let model = &self.inner;
        py.detach(|| {
            texts
                .iter()
                .map(|t| model.predict(&encode(t, &vocab.inner, max)))
                .collect::<adtext_core::Result<Vec<f64>>>()
        })
        .map_err(err)
    }

    /// Fine-tune in place on (text, label) pairs; keeps the weights of the
    /// best validation epoch. Returns the best validation MAE and its epoch.
    #[pyo3(signature = (vocab, train_texts, train_labels, val_texts, val_labels, lr = 1e-6, epochs = 100, batch_size = 12, patience = 5, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        vocab: &PyVocab,
        train_texts: Vec<String>,
        train_labels: Vec<f64>,
        val_texts: Vec<String>,
        val_labels: Vec<f64>,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        patience: usize,
        seed: u64,
    ) -> PyResult<(f64, usize)> {
        let train = samples(train_texts, train_labels, Split::Train)?;
        let val = samples(val_texts, val_labels, Split::Id)?;
        let run = TrainRunConfig {
            base_lr: lr,
            max_epochs: epochs,
            batch_size,
            early_stopping_patience: patience,
            seed,
            ..Default::default()
        };
        let model = &self.inner;
        let out = py
            .detach(|| train_regression(model, &train, &val, &vocab.inner, &run))
            .map_err(err)?;
        self.inner = out.best_model;
        Ok((out.best_val_mae, out.best_epoch))
    }
}

/// Split-wise MAE, pair counts, SECR and error propagation for predictions.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    ids: Vec<String>,
    splits: Vec<String>,
    smiles: Vec<String>,
    formulas: Vec<String>,
    labels: Vec<f64>,
    predictions: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let n = ids.len();
    if [splits.len(), smiles.len(), formulas.len(), labels.len(), predictions.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(PyValueError::new_err("all columns must have the same length"));
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let split: Split = splits[i].parse().map_err(err)?;
        records.push(PredictionRecord::new(&ids[i], split, &smiles[i], &formulas[i], labels[i], predictions[i]));
    }
    let report = py.detach(|| eval_report(&records)).map_err(err)?;
    let value = serde_json::to_value(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

#[pymodule]
fn adtext(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
