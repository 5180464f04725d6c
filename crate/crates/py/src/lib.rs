//! Python bindings: `import bdirank`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use bdirank_core::config::PipelineConfig;
use bdirank_core::corpus::{self, LabeledExample, TrecReader};
use bdirank_core::embed::{self, EmbeddingCollection};
use bdirank_core::eval::{self, AggregationRule, EmptySymptoms, JudgmentSet, Qrels, Run};
use bdirank_core::filter::linear::{self, LinearConfig};
use bdirank_core::filter::lstm::{self, LstmConfig};
use bdirank_core::pipeline::{self, RunOptions};
use bdirank_core::rank::{self, QueryEmbeddings, RankOptions};
use bdirank_core::{text, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    if e.is_internal() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn open(path: &PathBuf) -> PyResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))
}

fn create(path: &PathBuf) -> PyResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))
}

fn examples(texts: Vec<String>, labels: Vec<bool>) -> PyResult<Vec<LabeledExample>> {
    if texts.len() != labels.len() {
        return Err(PyValueError::new_err("texts and labels differ in length"));
    }
    Ok(texts.into_iter().zip(labels).map(|(t, l)| LabeledExample::new(t, l)).collect())
}

fn parse_rule(rule: &str) -> PyResult<AggregationRule> {
    rule.parse().map_err(py_err)
}

/// Lowercased alphanumeric tokens.
#[pyfunction]
fn tokenize(s: &str) -> Vec<String> {
    text::tokenize(s)
}

/// Reads a TREC corpus into `(sentence_id, text)` pairs.
#[pyfunction]
fn read_trec(path: PathBuf) -> PyResult<Vec<(String, String)>> {
    TrecReader::new(open(&path)?)
        .map(|r| r.map(|r| (r.sentence_id, r.text)).map_err(py_err))
        .collect()
}

/// Reads a labeled `text,label` CSV into `(texts, labels)`.
#[pyfunction]
fn read_labeled_csv(path: PathBuf) -> PyResult<(Vec<String>, Vec<bool>)> {
    let data = corpus::parse_labeled_csv(open(&path)?, &path.display().to_string()).map_err(py_err)?;
    Ok(data.examples.into_iter().map(|e| (e.text, e.label)).unzip())
}

/// Deterministic bag-of-tokens embedder.
#[pyclass(frozen)]
struct HashEmbedder(embed::HashEmbedder);

#[pymethods]
impl HashEmbedder {
    #[new]
    #[pyo3(signature = (dim = embed::DEFAULT_DIM, seed = 42))]
    fn new(dim: usize, seed: u64) -> PyResult<Self> {
        embed::HashEmbedder::new(dim, seed).map(HashEmbedder).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> PyResult<Vec<f32>> {
        self.0.embed("", text).map(|v| v.values).map_err(py_err)
    }
}

/// Cosine similarity of two unit vectors.
#[pyfunction]
fn cosine(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    rank::cosine(&u, &v).map_err(py_err)
}

/// Validates a BDEM file and returns its summary.
#[pyfunction]
fn embed_check<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let r = embed::check(&mut open(&path)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("count", r.count)?;
    d.set_item("dim", r.dim)?;
    d.set_item("renormalized", r.renormalized)?;
    d.set_item("max_norm_error", r.max_norm_error)?;
    d.set_item("passed", r.passed())?;
    Ok(d)
}

/// Stage-1 hashed n-gram logistic classifier.
#[pyclass(frozen)]
struct LinearModel(linear::LinearModel);

#[pymethods]
impl LinearModel {
    #[staticmethod]
    #[pyo3(signature = (texts, labels, epochs = 20, learning_rate = 0.1, seed = 42))]
    fn train(texts: Vec<String>, labels: Vec<bool>, epochs: usize, learning_rate: f64, seed: u64) -> PyResult<Self> {
        let config = LinearConfig {
            epochs,
            learning_rate,
            seed,
            ..LinearConfig::default()
        };
        linear::train_linear(&examples(texts, labels)?, None, &config)
            .map(LinearModel)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        linear::LinearModel::read_from(&mut open(&path)?).map(LinearModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut w = create(&path)?;
        self.0.write_to(&mut w).map_err(py_err)?;
        w.flush().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn score(&self, text: &str) -> f64 {
        self.0.score(text)
    }

    #[getter]
    fn loss_curve(&self) -> Vec<f64> {
        self.0.meta.loss_curve.clone()
    }
}

/// `(train_loss, validation_accuracy)` for one epoch.
type EpochRow = (f64, Option<f64>);

/// Stage-2 LSTM classifier.
#[pyclass(frozen)]
struct LstmModel(lstm::LstmModel);

#[pymethods]
impl LstmModel {
    /// Trains on `(texts, labels)`; returns the model and per-epoch `(train_loss, validation_accuracy)`.
    #[staticmethod]
    #[pyo3(signature = (texts, labels, validation_texts = None, validation_labels = None, epochs = 20, learning_rate = 0.05, hidden = 128, embed_dim = 64, seed = 42))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        texts: Vec<String>,
        labels: Vec<bool>,
        validation_texts: Option<Vec<String>>,
        validation_labels: Option<Vec<bool>>,
        epochs: usize,
        learning_rate: f64,
        hidden: usize,
        embed_dim: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<EpochRow>)> {
        let config = LstmConfig {
            epochs,
            learning_rate,
            hidden,
            embed_dim,
            seed,
            ..LstmConfig::default()
        };
        let train = examples(texts, labels)?;
        let validation = match (validation_texts, validation_labels) {
            (Some(t), Some(l)) => Some(examples(t, l)?),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("validation texts and labels go together")),
        };
        let (model, log) = lstm::train_lstm(&train, validation.as_deref(), &config).map_err(py_err)?;
        Ok((
            LstmModel(model),
            log.into_iter().map(|e| (e.train_loss, e.validation_accuracy)).collect(),
        ))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        lstm::LstmModel::read_from(&mut open(&path)?).map(LstmModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut w = create(&path)?;
        self.0.write_to(&mut w).map_err(py_err)?;
        w.flush().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn score(&self, text: &str) -> f64 {
        self.0.score(text)
    }
}

/// Ranks the sentences of a BDEM file against the 84 query vectors of another.
/// Returns `(symptom_id, sentence_id, rank, score)` rows.
#[pyfunction]
#[pyo3(signature = (queries, embeddings, cutoff = rank::DEFAULT_CUTOFF, multi_assign = false, workers = 1))]
fn rank_embeddings(
    queries: PathBuf,
    embeddings: PathBuf,
    cutoff: usize,
    multi_assign: bool,
    workers: usize,
) -> PyResult<Vec<(u8, String, usize, f64)>> {
    let q = EmbeddingCollection::read_from(&mut open(&queries)?, "queries").map_err(py_err)?;
    let q = QueryEmbeddings::from_collection(&q).map_err(py_err)?;
    let s = EmbeddingCollection::read_from(&mut open(&embeddings)?, "sentences").map_err(py_err)?;
    let options = RankOptions {
        cutoff,
        multi_assign,
        workers,
    };
    let pools = rank::rank_corpus(s.iter(), &q, &options).map_err(py_err)?;
    Ok(pools
        .into_iter()
        .flatten()
        .map(|e| (e.symptom_id, e.sentence_id, e.rank, e.score))
        .collect())
}

fn relevant_set(relevant: &[String]) -> HashSet<&str> {
    relevant.iter().map(String::as_str).collect()
}

fn as_strs(ranking: &[String]) -> Vec<&str> {
    ranking.iter().map(String::as_str).collect()
}

#[pyfunction]
fn average_precision(ranking: Vec<String>, relevant: Vec<String>) -> PyResult<f64> {
    eval::average_precision(&as_strs(&ranking), &relevant_set(&relevant)).map_err(py_err)
}

#[pyfunction]
fn r_precision(ranking: Vec<String>, relevant: Vec<String>) -> PyResult<f64> {
    eval::r_precision(&as_strs(&ranking), &relevant_set(&relevant)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ranking, relevant, k = eval::DEFAULT_PRECISION_K))]
fn precision_at_k(ranking: Vec<String>, relevant: Vec<String>, k: usize) -> PyResult<f64> {
    eval::precision_at_k(&as_strs(&ranking), &relevant_set(&relevant), k).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ranking, relevant, k = eval::DEFAULT_NDCG_K))]
fn ndcg_at_k(ranking: Vec<String>, relevant: Vec<String>, k: usize) -> PyResult<f64> {
    eval::ndcg_at_k(&as_strs(&ranking), &relevant_set(&relevant), k).map_err(py_err)
}

/// Scores a run file against one qrels file per assessor; returns the JSON report as a string.
#[pyfunction]
#[pyo3(signature = (run, qrels, rule = "majority", zero_empty = false))]
fn evaluate(run: PathBuf, qrels: Vec<PathBuf>, rule: &str, zero_empty: bool) -> PyResult<String> {
    let parsed = Run::parse(open(&run)?, &run.display().to_string()).map_err(py_err)?;
    let mut judgments = JudgmentSet::default();
    for q in &qrels {
        judgments
            .assessors
            .push(Qrels::parse(open(q)?, &q.display().to_string()).map_err(py_err)?);
    }
    let agg = eval::aggregate(&judgments, parse_rule(rule)?).map_err(py_err)?;
    let empty = if zero_empty { EmptySymptoms::Zero } else { EmptySymptoms::Exclude };
    eval::evaluate_run(&parsed, &agg, empty)
        .map(|r| r.to_json())
        .map_err(py_err)
}

/// `(stage, status, input_count, output_count, wall_ms)`
type LedgerRow = (String, String, u64, u64, u64);

/// Runs the pipeline for a config file; returns ledger rows
/// `(stage, status, input_count, output_count, wall_ms)`.
#[pyfunction]
#[pyo3(signature = (config, force = false))]
fn run_pipeline(config: PathBuf, force: bool) -> PyResult<Vec<LedgerRow>> {
    let cfg = PipelineConfig::load(&config).map_err(py_err)?;
    let out = pipeline::run_pipeline(&cfg, RunOptions { force }).map_err(py_err)?;
    Ok(out
        .ledger
        .records
        .into_iter()
        .map(|r| (r.stage.to_string(), r.status.to_string(), r.input_count, r.output_count, r.wall_ms))
        .collect())
}

#[pymodule]
fn bdirank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<HashEmbedder>()?;
    m.add_class::<LinearModel>()?;
    m.add_class::<LstmModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(read_trec, m)?)?;
    m.add_function(wrap_pyfunction!(read_labeled_csv, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(embed_check, m)?)?;
    m.add_function(wrap_pyfunction!(rank_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(r_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
