//! Python module exposing the caption-training pipeline: dataset
//! generation, retrieval/generator training, pair building, evaluation,
//! and the text/metric primitives.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use disccap_core::generator::{beam_decode, ImageCtx};
use disccap_core::metrics::{self, NGramStats};
use disccap_core::pipeline;
use disccap_core::synthworld::{DatasetConfig, Split};
use disccap_core::textcore;
use disccap_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::EmptyCorpus => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().map_err(py_err)
}

/// Token/id mapping with the reserved BOS/EOS/UNK/PAD block.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: textcore::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Build from an iterable of whitespace-tokenized strings.
    #[staticmethod]
    #[pyo3(signature = (corpus, min_count = 1))]
    fn from_corpus(corpus: Vec<String>, min_count: usize) -> PyResult<PyVocab> {
        Ok(PyVocab {
            inner: textcore::Vocab::build(&corpus, min_count).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<PyVocab> {
        Ok(PyVocab {
            inner: textcore::Vocab::from_json(json).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `[BOS] + ids + [EOS]`, unknown tokens mapped to UNK.
    fn tokenize(&self, text: &str) -> Vec<usize> {
        textcore::tokenize(text, &self.inner, textcore::MAX_LEN).0.ids
    }

    /// Surface string with reserved tokens dropped.
    fn detokenize(&self, ids: Vec<usize>) -> PyResult<String> {
        let caption = textcore::Caption::new(ids);
        textcore::detokenize(&caption, &self.inner).map_err(py_err)
    }

    fn token(&self, id: usize) -> Option<String> {
        self.inner.token(id).map(|s| s.to_string())
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.inner.id(token)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Generate the synthetic dataset into `out` (dataset.jsonl, vocab.json,
/// meta.json plus the n-gram sidecars).
#[pyfunction]
#[pyo3(signature = (out, n_train = 2000, n_val = 300, n_test = 300, d = 64, noise_sigma = 0.05, seed = 0))]
fn gen_data(
    out: PathBuf,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    d: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<()> {
    let cfg = DatasetConfig {
        n_train,
        n_val,
        n_test,
        feature_dim: d,
        noise_sigma,
        seed,
    };
    pipeline::gen_data(&cfg, &out).map_err(py_err)
}

/// Train the joint-embedding retrieval model; returns the checkpoint id and
/// the validation recall report.
#[pyfunction]
#[pyo3(signature = (data, out, seed = 0, epochs = 15))]
fn train_retrieval(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    seed: u64,
    epochs: usize,
) -> PyResult<Py<PyDict>> {
    let sidecar = pipeline::train_retrieval_cmd(&data, seed, epochs, &out).map_err(py_err)?;
    let recall: serde_json::Value = {
        let text = std::fs::read_to_string(format!("{}.recall.json", out.display()))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| PyRuntimeError::new_err(e.to_string()))?
    };
    let d = PyDict::new(py);
    d.set_item("id", sidecar.id)?;
    d.set_item("caption_r_at_1", recall["caption_retrieval"]["r_at"][0].as_f64())?;
    d.set_item("image_r_at_1", recall["image_retrieval"]["r_at"][0].as_f64())?;
    Ok(d.into())
}

/// MLE-pretrain a caption generator ("fc" or "attn"); returns the
/// checkpoint id.
#[pyfunction]
#[pyo3(signature = (data, out, variant = "fc", seed = 0, epochs = 20, batch = 64, lr = 5e-4))]
fn pretrain(
    data: PathBuf,
    out: PathBuf,
    variant: &str,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
) -> PyResult<String> {
    let variant = variant.parse().map_err(py_err)?;
    let sidecar =
        pipeline::pretrain_cmd(&data, variant, seed, epochs, batch, lr, &out).map_err(py_err)?;
    Ok(sidecar.id)
}

/// Self-critical fine-tuning; reward is "cider", "cider_disc" or
/// "mle_disc". Returns the checkpoint id.
#[pyfunction]
#[pyo3(signature = (data, init, out, reward = "cider", lambda_ = 1.0, retrieval = None, epochs = 10, seed = None))]
#[allow(clippy::too_many_arguments)]
fn train_rl(
    data: PathBuf,
    init: PathBuf,
    out: PathBuf,
    reward: &str,
    lambda_: f64,
    retrieval: Option<PathBuf>,
    epochs: usize,
    seed: Option<u64>,
) -> PyResult<String> {
    let kind = reward.parse().map_err(py_err)?;
    let sidecar = pipeline::train_rl_cmd(
        &data,
        &init,
        kind,
        lambda_,
        retrieval.as_deref(),
        epochs,
        seed,
        &out,
    )
    .map_err(py_err)?;
    Ok(sidecar.id)
}

/// Build the distractor-pair file; returns the number of pairs kept.
#[pyfunction]
#[pyo3(signature = (data, generator, out, n = None, split = "val"))]
fn build_pairs(
    data: PathBuf,
    generator: PathBuf,
    out: PathBuf,
    n: Option<usize>,
    split: &str,
) -> PyResult<usize> {
    pipeline::build_pairs_cmd(&data, &generator, n, parse_split(split)?, &out).map_err(py_err)
}

/// Full evaluation; writes the report JSON and returns it as a dict.
#[pyfunction]
#[pyo3(signature = (data, generator, pairs, retrieval, retrieval_new, out, split = "val"))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    data: PathBuf,
    generator: PathBuf,
    pairs: PathBuf,
    retrieval: PathBuf,
    retrieval_new: PathBuf,
    out: PathBuf,
    split: &str,
) -> PyResult<Py<PyDict>> {
    let report = pipeline::eval_cmd(
        &data,
        &generator,
        &pairs,
        &retrieval,
        &retrieval_new,
        parse_split(split)?,
        &out,
    )
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("model", report.model)?;
    d.set_item("seed", report.seed)?;
    d.set_item("acc", report.acc)?;
    d.set_item("acc_new", report.acc_new)?;
    d.set_item("bleu4", report.bleu4)?;
    d.set_item("cider", report.cider)?;
    d.set_item("distinct", report.distinct)?;
    d.set_item("avg_len", report.avg_len)?;
    d.set_item("n_pairs", report.n_pairs)?;
    d.set_item("ties", report.ties)?;
    d.set_item("dataset_hash", report.dataset_hash)?;
    Ok(d.into())
}

/// Beam-decode one image from the dataset by scene id.
#[pyfunction]
#[pyo3(signature = (data, generator, scene_id, beam = 2))]
fn caption_scene(data: PathBuf, generator: PathBuf, scene_id: u64, beam: usize) -> PyResult<String> {
    let world = pipeline::World::load(&data).map_err(py_err)?;
    let (gen, _) = pipeline::load_generator(&generator).map_err(py_err)?;
    let rec = world
        .dataset
        .train
        .iter()
        .chain(&world.dataset.val)
        .chain(&world.dataset.test)
        .find(|r| r.scene_id == scene_id)
        .ok_or_else(|| PyValueError::new_err(format!("unknown scene id {scene_id}")))?;
    let img = ImageCtx {
        global: &rec.global,
        regions: &rec.regions,
    };
    let d = beam_decode(&gen, &img, beam, gen.cfg.max_len).map_err(py_err)?;
    textcore::detokenize(&d.caption, &world.vocab).map_err(py_err)
}

/// CIDEr-D per-image scores and corpus mean; document frequencies come
/// from the references themselves.
#[pyfunction]
fn cider_d(candidates: Vec<String>, refs: Vec<Vec<String>>) -> PyResult<(Vec<f64>, f64)> {
    let stats = NGramStats::build(&refs).map_err(py_err)?;
    metrics::cider_d(&candidates, &refs, &stats).map_err(py_err)
}

/// Corpus BLEU-4; returns (smoothed, unsmoothed).
#[pyfunction]
fn bleu4(candidates: Vec<String>, refs: Vec<Vec<String>>) -> PyResult<(f64, f64)> {
    let b = metrics::bleu4(&candidates, &refs).map_err(py_err)?;
    Ok((b.smoothed, b.unsmoothed))
}

/// Distinct caption count and mean token length.
#[pyfunction]
fn diversity_stats(captions: Vec<String>) -> (usize, f64) {
    let d = metrics::diversity_stats(&captions);
    (d.distinct, d.avg_len)
}

/// Render the side-by-side table for saved report files.
#[pyfunction]
fn report_table(inputs: Vec<PathBuf>) -> PyResult<String> {
    pipeline::report_cmd(&inputs).map_err(py_err)
}

fn dataset_hash(data: &Path) -> PyResult<String> {
    disccap_core::synthworld::Dataset::hash_of_dir(data).map_err(py_err)
}

/// sha256 of a dataset directory's serialized records.
#[pyfunction]
#[pyo3(name = "dataset_hash")]
fn dataset_hash_py(data: PathBuf) -> PyResult<String> {
    dataset_hash(&data)
}

#[pymodule]
fn disccap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train_rl, m)?)?;
    m.add_function(wrap_pyfunction!(build_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(caption_scene, m)?)?;
    m.add_function(wrap_pyfunction!(cider_d, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_stats, m)?)?;
    m.add_function(wrap_pyfunction!(report_table, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_hash_py, m)?)?;
    Ok(())
}
