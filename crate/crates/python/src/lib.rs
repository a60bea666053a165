//! Python bindings: accounting, metrics, tokenisation, the encoder model with
//! adapter injection and checkpoints, and whole training runs.
//!
//! Structured results (reports, accounting rows) cross the boundary as JSON
//! and come out as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use peftt::accounting::{self, AccountingTarget};
use peftt::adapter::{inject_adapters, trainable_parameters, AdapterMode};
use peftt::checkpoint::{load_checkpoint, save_checkpoint};
use peftt::cli::{train_run, RunConfig, TrainArgs};
use peftt::data::{parse_synthetic, synthetic_splits, SyntheticSpec};
use peftt::encoder::{catalog_entry, count_parameters, EncoderConfig, EncoderModel, HeadKind};
use peftt::metrics;
use peftt::scenario::Mode;
use peftt::training::run_training;
use peftt::vocab;

fn py_err(e: peftt::Error) -> PyErr {
    match e {
        peftt::Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(py_err)
}

/// Adapter parameter count for a catalog model (`cino-small`, `tibert`, ...).
#[pyfunction]
#[pyo3(signature = (model_key, rank = 8))]
fn adapter_count(model_key: &str, rank: usize) -> PyResult<u64> {
    let entry = catalog_entry(model_key).ok_or_else(|| PyValueError::new_err(format!("unknown model `{model_key}`")))?;
    Ok(accounting::adapter_count(&entry.config, rank))
}

/// Trainable count and ratio for one catalog model and mode.
#[pyfunction]
#[pyo3(signature = (model_key, mode, rank = 8))]
fn ratio_report<'py>(py: Python<'py>, model_key: &str, mode: &str, rank: usize) -> PyResult<Bound<'py, PyAny>> {
    let row = accounting::ratio_report(&AccountingTarget::Catalog(model_key.into()), parse_mode(mode)?, rank).map_err(py_err)?;
    to_py(py, &row)
}

/// All twenty scenario rows.
#[pyfunction]
#[pyo3(signature = (rank = 8))]
fn published_table<'py>(py: Python<'py>, rank: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &accounting::published_table(rank))
}

#[pyfunction]
fn accuracy(preds: Vec<usize>, golds: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&preds, &golds).map_err(py_err)
}

#[pyfunction]
fn macro_f1(preds: Vec<usize>, golds: Vec<usize>, n_classes: usize) -> PyResult<f64> {
    metrics::macro_f1(&preds, &golds, n_classes).map_err(py_err)
}

/// Syllable tokens of a Tibetan string after symbol clean-up.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    vocab::tokenize(&vocab::preprocess_symbols(text))
}

/// A seeded synthetic corpus as `{"train": [(label, text)], ...}`.
#[pyfunction]
#[pyo3(signature = (n_classes = 12, n_per_class = 50, seed = 0))]
fn synthetic_corpus<'py>(py: Python<'py>, n_classes: usize, n_per_class: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let s = synthetic_splits(n_classes, n_per_class, &SyntheticSpec::default(), seed).map_err(py_err)?;
    let rows = |v: &[peftt::data::Example]| -> Vec<(String, String)> {
        v.iter().map(|e| (s.label_names[e.label].clone(), e.text.clone())).collect()
    };
    let out = serde_json::json!({
        "label_names": s.label_names,
        "train": rows(&s.train),
        "validation": rows(&s.validation),
        "test": rows(&s.test),
    });
    to_py(py, &out)
}

/// Trains one scenario and returns its report. `corpus` is
/// `synthetic:CxN`, one TSV file, or three comma-separated TSV files; file
/// corpora in prompt modes need `template` and `verbalizer`. With `out`, the
/// run directory (report, vocabulary, checkpoints) is written as well.
#[pyfunction]
#[pyo3(signature = (
    scenario, corpus = "synthetic:12x50".to_string(), epochs = None, seed = 0, lr = None, batch_size = None,
    rank = None, max_len = 108, template = None, verbalizer = None, out = None
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    scenario: String,
    corpus: String,
    epochs: Option<usize>,
    seed: u64,
    lr: Option<f64>,
    batch_size: Option<usize>,
    rank: Option<usize>,
    max_len: usize,
    template: Option<PathBuf>,
    verbalizer: Option<PathBuf>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let args = TrainArgs {
        scenario: Some(scenario),
        rank,
        lr,
        batch_size,
        epochs,
        max_len,
        seed,
        corpus,
        template,
        verbalizer,
        delimiter: "\t".into(),
        out: out.clone().unwrap_or_default(),
        repeats: 1,
        ..TrainArgs::default()
    };
    let config = RunConfig::from_args(&args).map_err(py_err)?;
    let report = py
        .detach(|| match &out {
            Some(dir) => train_run(&config, dir),
            None => {
                let splits = config.corpus()?;
                let prompt = config.prompt(&splits.label_names)?;
                run_training(&config.scenario, &splits, prompt.as_ref())
            }
        })
        .map_err(py_err)?;
    to_py(py, &report)
}

/// Whether `corpus` names a synthetic corpus, as `(classes, per_class)`.
#[pyfunction]
fn parse_synthetic_spec(corpus: &str) -> Option<(usize, usize)> {
    parse_synthetic(corpus)
}

/// The encoder with its head, optionally carrying LoRA adapters.
#[pyclass(name = "Model")]
struct PyModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyModel {
    /// `head` is `"mlm"` or `"classifier"` (which needs `n_classes`).
    #[new]
    #[pyo3(signature = (
        vocab_size, n_layers = 2, d_model = 32, d_ff = 64, n_heads = 2, max_len = 108,
        head = "mlm", n_classes = None, tied = false, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        n_layers: usize,
        d_model: usize,
        d_ff: usize,
        n_heads: usize,
        max_len: usize,
        head: &str,
        n_classes: Option<usize>,
        tied: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = EncoderConfig {
            n_layers,
            d_model,
            d_ff,
            n_heads,
            vocab_size,
            max_len,
        };
        let head = match (head, n_classes) {
            ("mlm", _) => HeadKind::Mlm { tied },
            ("classifier", Some(n)) => HeadKind::Classifier { n_classes: n },
            ("classifier", None) => return Err(PyValueError::new_err("classifier head needs n_classes")),
            (other, _) => return Err(PyValueError::new_err(format!("unknown head `{other}`"))),
        };
        Ok(Self {
            inner: EncoderModel::new(config, head, seed).map_err(py_err)?,
        })
    }

    /// Injects parallel LoRA (`"parallel"`) or sequential (`"sequential"`)
    /// adapters and freezes the rest of the model.
    #[pyo3(signature = (rank = 8, seed = 0, mode = "parallel"))]
    fn inject_adapters(&mut self, rank: usize, seed: u64, mode: &str) -> PyResult<()> {
        let mode = match mode {
            "parallel" => AdapterMode::ParallelLora,
            "sequential" => AdapterMode::Sequential,
            other => return Err(PyValueError::new_err(format!("unknown adapter mode `{other}`"))),
        };
        inject_adapters(&mut self.inner, rank, mode, seed).map_err(py_err)?;
        Ok(())
    }

    fn trainable_parameters(&self) -> u64 {
        trainable_parameters(&self.inner).1
    }

    /// Scalars of the model without adapters.
    fn base_parameters(&self) -> u64 {
        count_parameters(self.inner.config(), self.inner.head_kind())
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(_, name, _)| name.to_string()).collect()
    }

    /// Vocabulary logits per position, `[len][vocab]`. Ids equal to 0 are
    /// treated as padding.
    fn forward_mlm(&self, py: Python<'_>, ids: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let pads: Vec<bool> = ids.iter().map(|&i| i == vocab::PAD_ID).collect();
        let out = py.detach(|| self.inner.forward_mlm(&ids, &pads)).map_err(py_err)?;
        let v = self.inner.config().vocab_size;
        Ok(out.data().chunks(v).map(<[f32]>::to_vec).collect())
    }

    /// Grows the token embeddings (and an untied decoder) to `vocab_size`.
    #[pyo3(signature = (vocab_size, seed = 0))]
    fn resize_embeddings(&mut self, vocab_size: usize, seed: u64) -> PyResult<()> {
        self.inner.resize_embeddings(vocab_size, seed).map_err(py_err)
    }

    #[pyo3(signature = (path, adapters_only = false))]
    fn save(&self, path: PathBuf, adapters_only: bool) -> PyResult<()> {
        save_checkpoint(&self.inner, &path, adapters_only).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(n_layers={}, d_model={}, d_ff={}, n_heads={}, vocab_size={}, max_len={}, adapters={})",
            c.n_layers,
            c.d_model,
            c.d_ff,
            c.n_heads,
            c.vocab_size,
            c.max_len,
            self.inner.adapters().map_or(0, |a| a.rank())
        )
    }
}

#[pymodule]
fn peftt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(adapter_count, m)?)?;
    m.add_function(wrap_pyfunction!(ratio_report, m)?)?;
    m.add_function(wrap_pyfunction!(published_table, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(parse_synthetic_spec, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
