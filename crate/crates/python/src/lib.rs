//! Python bindings for minis2t.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use minis2t::audio::{FrontendConfig, MelFrontend, Waveform};
use minis2t::config::RunConfig;
use minis2t::decoding::{search, DecodeOptions, ModelScorer};
use minis2t::evaluation::{self, EvalConfig, Metric};
use minis2t::model::{S2TModel, Source, Task};
use minis2t::tensor::{Checkpoint, Tensor};
use minis2t::tokenize::{BpeModel, Scheme, DEFAULT_PROTECTED};
use minis2t::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Log-Mel filterbank features, one row per 10 ms frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16000, n_mels=80))]
fn log_mel(samples: Vec<f32>, sample_rate: u32, n_mels: usize) -> PyResult<Vec<Vec<f32>>> {
    let fe = MelFrontend::new(FrontendConfig {
        sample_rate,
        n_mels,
        ..FrontendConfig::default()
    })
    .map_err(to_py)?;
    let f = fe.log_mel(&Waveform { samples, sample_rate }).map_err(to_py)?;
    Ok((0..f.num_frames()).map(|t| f.frame(t).to_vec()).collect())
}

/// Reads a 16-bit PCM WAV file. Returns `(samples, sample_rate)`.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let w = minis2t::audio::load_wav(&path, None).map_err(to_py)?;
    Ok((w.samples, w.sample_rate))
}

/// CTC negative log-likelihood and its gradient w.r.t. the `T × V`
/// log-probabilities. Id 0 is the blank.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let v = log_probs.first().map_or(0, Vec::len);
    if v == 0 || log_probs.iter().any(|r| r.len() != v) {
        return Err(PyValueError::new_err("log_probs must be a non-empty rectangular T x V table"));
    }
    let flat: Vec<f64> = log_probs.concat();
    let (nll, grad) = minis2t::objectives::ctc_nll_and_grad(&flat, v, &target).map_err(to_py)?;
    Ok((nll, grad.chunks(v).map(<[f64]>::to_vec).collect()))
}

/// Corpus-level WER, BLEU or chrF with the default normalization of each metric.
#[pyfunction]
fn score(metric: &str, hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    let m: Metric = metric.parse().map_err(|e: String| PyValueError::new_err(e))?;
    evaluation::score(&hyps, &refs, &EvalConfig::for_metric(m)).map_err(to_py)
}

/// Trains from a YAML config and returns a summary dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let out = minis2t::train::train(&cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("steps", out.state.step)?;
    d.set_item("best_metric", out.state.best_metric)?;
    d.set_item("stopped_early", out.stopped_early)?;
    d.set_item("model_dir", out.model_dir)?;
    Ok(d)
}

/// Decodes a manifest or input list and writes one hypothesis per line.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, input, output, beam_size=None))]
fn recognize(config: PathBuf, checkpoint: PathBuf, input: PathBuf, output: PathBuf, beam_size: Option<usize>) -> PyResult<Vec<String>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let out = minis2t::inference::run_inference(&cfg, &checkpoint, &input, &output, beam_size).map_err(to_py)?;
    Ok(out.hypotheses)
}

#[pyfunction]
fn average_checkpoints(output: PathBuf, inputs: Vec<PathBuf>) -> PyResult<()> {
    let ckpts = inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
    minis2t::train::average_checkpoints(&ckpts).map_err(to_py)?.save(&output).map_err(to_py)
}

#[pyclass(name = "Tokenizer")]
struct PyTokenizer {
    inner: minis2t::tokenize::Tokenizer,
}

#[pymethods]
impl PyTokenizer {
    #[new]
    #[pyo3(signature = (scheme="char", bpe_model=None))]
    fn new(scheme: &str, bpe_model: Option<PathBuf>) -> PyResult<Self> {
        let scheme: Scheme = scheme.parse().map_err(|e: String| PyValueError::new_err(e))?;
        let bpe = bpe_model.map(|p| BpeModel::load(&p)).transpose().map_err(to_py)?;
        let protected = DEFAULT_PROTECTED.iter().map(|s| s.to_string()).collect();
        let inner = minis2t::tokenize::Tokenizer::new(scheme, bpe, protected).map_err(to_py)?;
        Ok(PyTokenizer { inner })
    }

    fn tokenize(&self, text: &str) -> Vec<String> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: Vec<String>) -> String {
        self.inner.detokenize(&tokens)
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: S2TModel<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            inner: S2TModel::from_checkpoint(&ckpt).map_err(to_py)?,
        })
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.config().task.as_str()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().ids().map(|id| self.inner.params().value(id).numel()).sum()
    }

    /// Decodes one `T × d` feature matrix. Returns `(token_ids, score)` with
    /// bos and eos stripped.
    #[pyo3(signature = (features, beam_size=5, max_output_length=200, length_penalty=1.0))]
    fn decode(&self, features: Vec<Vec<f32>>, beam_size: usize, max_output_length: usize, length_penalty: f64) -> PyResult<(Vec<usize>, f64)> {
        if self.inner.config().task != Task::S2T {
            return Err(PyValueError::new_err("decode takes features; this is an MT model"));
        }
        let t = features.len();
        let d = features.first().map_or(0, Vec::len);
        if t == 0 || features.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("features must be a non-empty rectangular T x d table"));
        }
        let src = Source::Features(Tensor::new(&[1, t, d], features.concat()).map_err(to_py)?);
        let mut scorer = ModelScorer::new(&self.inner, &src, t).map_err(to_py)?;
        let opts = DecodeOptions {
            beam_size,
            max_output_length,
            length_penalty,
            ..DecodeOptions::greedy()
        };
        let best = search(&mut scorer, &opts).map_err(to_py)?.swap_remove(0);
        Ok((best.output().to_vec(), best.score))
    }
}

#[pymodule]
pub fn minis2t_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(recognize, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    m.add_class::<PyTokenizer>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
