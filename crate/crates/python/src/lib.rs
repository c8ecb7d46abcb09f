//! Python bindings: models, decoding, BPE, vocabularies, tokenizers and BLEU.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use phrasetrans::bleu::{corpus_bleu as bleu, SignatureInfo};
use phrasetrans::bpe::{self, BpeModel, WordMode};
use phrasetrans::checkpoint::{average_checkpoint_files, Checkpoint};
use phrasetrans::config::RunConfig;
use phrasetrans::corpus::Vocab;
use phrasetrans::decoding::{beam_search, greedy_decode, BeamOptions};
use phrasetrans::model::count_parameters as count;
use phrasetrans::tokenize::{self, Tokenizer};
use phrasetrans::train::{self, EncodedPair, TrainConfig};
use phrasetrans::{Error, Model, ModelConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn model_config(json: &str) -> PyResult<ModelConfig> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Encoder-decoder translation model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
    run: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh model from a JSON model configuration.
    #[new]
    #[pyo3(signature = (config_json, seed = 1))]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg = model_config(config_json)?;
        let inner = Model::new(cfg.clone(), seed).map_err(py_err)?;
        let run = RunConfig { model: cfg, ..RunConfig::default() };
        Ok(PyModel { inner, run })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        let run = RunConfig::from_json(&ckpt.config).map_err(py_err)?;
        let inner = Model::from_tensors(run.model.clone(), ckpt.tensors).map_err(py_err)?;
        Ok(PyModel { inner, run })
    }

    fn save_checkpoint(&self, path: PathBuf, step: u64, epoch: u64) -> PyResult<()> {
        Checkpoint::new(step, epoch, self.run.to_json_line(), self.inner.named_tensors())
            .and_then(|c| c.save(&path))
            .map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Encoder output rows for one sentence of source ids (no specials added).
    fn encode(&self, src_ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.encode_sentence(&src_ids).map_err(py_err)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    #[pyo3(signature = (src_ids, max_len = 100))]
    fn greedy(&self, src_ids: Vec<usize>, max_len: usize) -> PyResult<Vec<usize>> {
        greedy_decode(&self.inner, &src_ids, max_len).map_err(py_err)
    }

    #[pyo3(signature = (src_ids, beam_size = 4, max_len = 100, length_norm = true))]
    fn beam(&self, src_ids: Vec<usize>, beam_size: usize, max_len: usize, length_norm: bool) -> PyResult<Vec<usize>> {
        beam_search(&self.inner, &src_ids, BeamOptions { beam_size, max_len, length_norm }).map_err(py_err)
    }

    /// Trains in place on `(source_ids, target_ids)` pairs; returns per-epoch training loss.
    #[pyo3(signature = (pairs, train_config_json = "{}"))]
    fn train(&mut self, pairs: Vec<(Vec<usize>, Vec<usize>)>, train_config_json: &str) -> PyResult<Vec<f64>> {
        let cfg: TrainConfig =
            serde_json::from_str(train_config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let pairs: Vec<EncodedPair> = pairs;
        let report = train::train_loop(&mut self.inner, &cfg, &pairs, &[], None).map_err(py_err)?;
        self.run.train = cfg;
        Ok(report.epochs.iter().map(|e| e.train_loss).collect())
    }

    /// Teacher-forced next-token accuracy.
    fn accuracy(&self, pairs: Vec<(Vec<usize>, Vec<usize>)>) -> PyResult<f64> {
        train::evaluate_accuracy(&self.inner, &pairs, 4096).map_err(py_err)
    }
}

/// Learned BPE merges.
#[pyclass(name = "Bpe")]
struct PyBpe {
    inner: BpeModel,
}

#[pymethods]
impl PyBpe {
    #[staticmethod]
    #[pyo3(signature = (lines, num_ops, mode = "whitespace"))]
    fn learn(lines: Vec<String>, num_ops: usize, mode: &str) -> PyResult<Self> {
        Ok(PyBpe { inner: bpe::learn_bpe(&lines, num_ops, parse::<WordMode>(mode)?) })
    }

    #[staticmethod]
    #[pyo3(signature = (path, mode = "whitespace"))]
    fn load(path: PathBuf, mode: &str) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyBpe { inner: BpeModel::read_merges(std::io::BufReader::new(f), parse(mode)?).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut f = std::fs::File::create(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.write_merges(&mut f).map_err(py_err)
    }

    fn merges(&self) -> Vec<(String, String)> {
        self.inner.merges().to_vec()
    }

    fn apply(&self, line: &str) -> Vec<String> {
        self.inner.apply(line)
    }
}

/// Symbol table with `<pad> <unk> <s> </s>` at ids 0..3.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    fn build(lines: Vec<String>) -> Self {
        PyVocab { inner: Vocab::build(lines.iter().map(String::as_str)) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, line: &str) -> Vec<usize> {
        self.inner.encode(line)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn symbol(&self, id: usize) -> Option<String> {
        self.inner.symbol(id).map(str::to_string)
    }
}

#[pyfunction]
fn undo_bpe(pieces: Vec<String>) -> String {
    bpe::undo_bpe(&pieces)
}

#[pyfunction]
fn tokenize_13a(line: &str) -> Vec<String> {
    tokenize::tokenize_13a(line)
}

#[pyfunction]
fn tokenize_zh(line: &str) -> Vec<String> {
    tokenize::tokenize_zh(line)
}

/// Corpus BLEU; returns a dict with score, precisions, bp, lengths and signature.
#[pyfunction]
#[pyo3(signature = (hyps, refs, tok = "13a", lang = None, version = None))]
fn corpus_bleu<'py>(
    py: Python<'py>,
    hyps: Vec<String>,
    refs: Vec<String>,
    tok: &str,
    lang: Option<String>,
    version: Option<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut info = SignatureInfo { lang, ..SignatureInfo::default() };
    if let Some(v) = version {
        info.version = v;
    }
    let r = bleu(&hyps, &refs, parse::<Tokenizer>(tok)?, &info).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("score", r.score)?;
    d.set_item("precisions", r.precisions.to_vec())?;
    d.set_item("bp", r.brevity_penalty)?;
    d.set_item("hyp_len", r.hyp_len)?;
    d.set_item("ref_len", r.ref_len)?;
    d.set_item("signature", r.signature.clone())?;
    d.set_item("report", r.report())?;
    Ok(d)
}

#[pyfunction]
fn count_parameters(config_json: &str) -> PyResult<usize> {
    count(&model_config(config_json)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (step, peak_lr = 7e-4, warmup_steps = 6000))]
fn lr_at_step(step: u64, peak_lr: f64, warmup_steps: u64) -> f64 {
    train::lr_at_step(step, &TrainConfig { peak_lr, warmup_steps, ..TrainConfig::default() })
}

#[pyfunction]
fn average_checkpoints(paths: Vec<PathBuf>, out: PathBuf) -> PyResult<()> {
    average_checkpoint_files(&paths).and_then(|c| c.save(&out)).map_err(py_err)
}

#[pymodule]
fn pyphrasetrans(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyBpe>()?;
    m.add_class::<PyVocab>()?;
    m.add_function(wrap_pyfunction!(undo_bpe, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_13a, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize_zh, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    Ok(())
}
