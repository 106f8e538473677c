//! Python bindings for the attribution-injection framework.
//!
//! The module mirrors the crate's main types and operations:
//!
//! * [`Config`] — the experiment configuration (JSON round-trip);
//! * [`Corpus`] — synthetic translation tasks with gold word alignments;
//! * [`Model`] — the sequence-to-sequence transformer: train, generate
//!   (optionally with injected attention maps), extract attribution maps;
//! * free functions for the map/sequence metrics and column normalization;
//! * `run_*` wrappers over the run-directory pipeline stages, returning the
//!   same JSON summaries the command-line tool writes.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use attrinject_core::attribution::{attribute, AttributionConfig, Method};
use attrinject_core::checkpoint::{load_model, save_model};
use attrinject_core::data::{generate_task, split_indices, Corpus as CoreCorpus};
use attrinject_core::injection::normalize_columns;
use attrinject_core::metrics;
use attrinject_core::pipeline::{
    stage_evaluate, stage_extract, stage_report, stage_sanity, stage_train_attributor,
    stage_train_student, stage_train_teacher, ExperimentConfig, HeadMaskKind, MapSource, RunDir,
    StudentSpec, TargetOrigin,
};
use attrinject_core::tape::ComposeOp;
use attrinject_core::tensor::Tensor;
use attrinject_core::train::{train_model, AdamConfig, TrainConfig};
use attrinject_core::transformer::{GenerationInjection, ModelConfig, Seq2SeqModel, Site};

fn oops(e: attrinject_core::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Nested lists → a row-major `[rows, cols]` tensor.
fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows must all have the same length"));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_vec(vec![rows.len(), cols], data).map_err(oops)
}

/// A `[rows, cols]` tensor → nested lists.
fn from_matrix(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_method(name: &str) -> PyResult<Method> {
    Method::from_name(name).map_err(oops)
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Experiment configuration: task, model shapes, training budgets, and the
/// method/operator/site/mask grid.  Construct the desk-scale default and
/// adjust fields through the JSON representation.
#[pyclass]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// The desk-scale default configuration.
    #[staticmethod]
    fn desk() -> Config {
        Config { inner: ExperimentConfig::desk() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Config> {
        let inner: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(oops)?;
        Ok(Config { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Config> {
        Ok(Config { inner: ExperimentConfig::load(&path).map_err(oops)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(oops)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(task: {} pairs, vocab {}, teacher d{}, student d{})",
            self.inner.task.pairs,
            self.inner.task.vocab_words,
            self.inner.teacher.d_model,
            self.inner.student.d_model,
        )
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// A synthetic parallel corpus with known gold word alignments.
#[pyclass]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    /// Generate the synthetic task described by `config.task`.
    #[staticmethod]
    fn generate(config: &Config) -> PyResult<Corpus> {
        Ok(Corpus { inner: generate_task(&config.inner.task).map_err(oops)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Corpus> {
        Ok(Corpus { inner: CoreCorpus::load(&path).map_err(oops)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(oops)
    }

    fn __len__(&self) -> usize {
        self.inner.examples.len()
    }

    fn source_vocab_size(&self) -> usize {
        self.inner.src_vocab.len()
    }

    fn target_vocab_size(&self) -> usize {
        self.inner.tgt_vocab.len()
    }

    /// Source words of pair `i`.
    fn source(&self, i: usize) -> PyResult<Vec<String>> {
        let ex = self.inner.examples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!("pair {i} out of range"))
        })?;
        Ok(ex.source.clone())
    }

    /// Target words of pair `i`.
    fn target(&self, i: usize) -> PyResult<Vec<String>> {
        let ex = self.inner.examples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!("pair {i} out of range"))
        })?;
        Ok(ex.target.clone())
    }

    /// Gold alignment of pair `i` as a 0/1 matrix over source rows and
    /// target columns, both extended with the end-of-sequence position.
    fn gold_alignment(&self, i: usize) -> PyResult<Option<Vec<Vec<f64>>>> {
        let ex = self.inner.examples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!("pair {i} out of range"))
        })?;
        Ok(ex.alignment_with_eos().map(|t| from_matrix(&t)))
    }

    /// Source token ids of pair `i` (ends with the end-of-sequence id).
    fn encode_source(&self, i: usize) -> PyResult<Vec<usize>> {
        let ex = self.inner.examples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!("pair {i} out of range"))
        })?;
        self.inner.encode_source(ex).map_err(oops)
    }

    /// Target token ids of pair `i` (ends with the end-of-sequence id).
    fn encode_target(&self, i: usize) -> PyResult<Vec<usize>> {
        let ex = self.inner.examples.get(i).ok_or_else(|| {
            PyValueError::new_err(format!("pair {i} out of range"))
        })?;
        self.inner.encode_target(ex).map_err(oops)
    }

    /// Target-side ids → words.
    fn decode_target(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.tgt_vocab.decode(&ids)
    }

    /// Deterministic train/validation/test pair-index split.
    fn split(
        &self,
        valid_frac: f64,
        test_frac: f64,
        seed: u64,
    ) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        split_indices(self.inner.examples.len(), valid_frac, test_frac, seed)
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus({} pairs, {} source / {} target tokens)",
            self.inner.examples.len(),
            self.inner.src_vocab.len(),
            self.inner.tgt_vocab.len(),
        )
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The sequence-to-sequence transformer (encoder–decoder, pre-norm,
/// learned positions), with training, generation, map injection during
/// generation, and attribution-map extraction.
#[pyclass]
struct Model {
    inner: Seq2SeqModel,
}

impl Model {
    fn encode_pairs(
        &self,
        corpus: &Corpus,
        ix: &[usize],
    ) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
        ix.iter()
            .map(|&i| {
                let ex = &corpus.inner.examples[i];
                Ok((
                    corpus.inner.encode_source(ex).map_err(oops)?,
                    corpus.inner.encode_target(ex).map_err(oops)?,
                ))
            })
            .collect()
    }

    fn injection(
        &self,
        squares: Vec<Vec<Vec<f64>>>,
        op: &str,
        site: &str,
        head_mask: Option<Vec<bool>>,
    ) -> PyResult<GenerationInjection> {
        let site = Site::from_name(site).map_err(oops)?;
        let compose = ComposeOp::from_name(op).map_err(oops)?;
        let heads = self.inner.config.heads;
        let head_mask = match head_mask {
            Some(m) if m.len() == heads => m,
            Some(m) => {
                return Err(PyValueError::new_err(format!(
                    "head mask has {} entries for {} heads",
                    m.len(),
                    heads
                )))
            }
            None => vec![true; heads],
        };
        let squares = squares
            .iter()
            .map(|sq| to_matrix(sq))
            .collect::<PyResult<Vec<Tensor>>>()?;
        Ok(GenerationInjection { site, compose, head_mask, squares })
    }
}

#[pymethods]
impl Model {
    /// Initialise a fresh model.
    #[staticmethod]
    #[pyo3(signature = (src_vocab, tgt_vocab, d_model, d_ff, heads, enc_layers, dec_layers, max_len, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        src_vocab: usize,
        tgt_vocab: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        enc_layers: usize,
        dec_layers: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Model> {
        let cfg = ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model,
            d_ff,
            heads,
            enc_layers,
            dec_layers,
            max_len,
        };
        Ok(Model { inner: Seq2SeqModel::init(cfg, seed).map_err(oops)? })
    }

    /// Load a checkpoint written by `save` or by the pipeline stages.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        Ok(Model { inner: load_model(&path).map_err(oops)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(oops)
    }

    /// Model dimensions as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        json(&self.inner.config)
    }

    /// Train on a deterministic split of `corpus` (no injection).
    /// Returns the training report as a JSON string.
    #[pyo3(signature = (corpus, epochs, batch_size, lr=1e-3, patience=0, seed=0, valid_frac=0.1, test_frac=0.1, split_seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        corpus: &Corpus,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        patience: usize,
        seed: u64,
        valid_frac: f64,
        test_frac: f64,
        split_seed: u64,
    ) -> PyResult<String> {
        let (train_ix, valid_ix, _test_ix) =
            split_indices(corpus.inner.examples.len(), valid_frac, test_frac, split_seed);
        let train_pairs = self.encode_pairs(corpus, &train_ix)?;
        let valid_pairs = self.encode_pairs(corpus, &valid_ix)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            patience,
            seed,
        };
        let report = train_model(
            &mut self.inner,
            &train_pairs,
            &valid_pairs,
            None,
            None,
            &cfg,
            |_| {},
        )
        .map_err(oops)?;
        json(&report)
    }

    /// Greedy generation.  `srcs` are id sequences ending with the
    /// end-of-sequence id; the outputs do not include it.
    #[pyo3(signature = (srcs, max_steps=None))]
    fn generate(
        &self,
        srcs: Vec<Vec<usize>>,
        max_steps: Option<usize>,
    ) -> PyResult<Vec<Vec<usize>>> {
        let steps = max_steps.unwrap_or(self.inner.config.max_len - 1);
        self.inner.generate(&srcs, None, steps).map_err(oops)
    }

    /// Greedy generation with attention maps composed in at `site` under
    /// `op`.  One square matrix per source, at least source-length
    /// (encoder site) or model-max-length (cross site) on each side.
    #[pyo3(signature = (srcs, squares, op="multiply", site="encoder_self", head_mask=None, max_steps=None))]
    fn generate_injected(
        &self,
        srcs: Vec<Vec<usize>>,
        squares: Vec<Vec<Vec<f64>>>,
        op: &str,
        site: &str,
        head_mask: Option<Vec<bool>>,
        max_steps: Option<usize>,
    ) -> PyResult<Vec<Vec<usize>>> {
        let gi = self.injection(squares, op, site, head_mask)?;
        let steps = max_steps.unwrap_or(self.inner.config.max_len - 1);
        self.inner.generate(&srcs, Some(&gi), steps).map_err(oops)
    }

    /// Beam-search generation for a single source.
    #[pyo3(signature = (src, width=4))]
    fn generate_beam(&self, src: Vec<usize>, width: usize) -> PyResult<Vec<usize>> {
        self.inner.generate_beam(&src, width, None).map_err(oops)
    }

    /// Token-level attribution map of one pair under one method, as a
    /// matrix over source rows and target columns.  Both id sequences must
    /// end with the end-of-sequence id.
    #[pyo3(signature = (src_ids, tgt_ids, method, ig_steps=16, shap_samples=8, shap_sigma_scale=0.05, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn attribute(
        &self,
        src_ids: Vec<usize>,
        tgt_ids: Vec<usize>,
        method: &str,
        ig_steps: usize,
        shap_samples: usize,
        shap_sigma_scale: f64,
        seed: u64,
    ) -> PyResult<Vec<Vec<f64>>> {
        let method = parse_method(method)?;
        let cfg = AttributionConfig { ig_steps, shap_samples, shap_sigma_scale, seed };
        let map = attribute(&self.inner, &src_ids, &tgt_ids, method, &cfg).map_err(oops)?;
        Ok(from_matrix(&map))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(d{} ff{} h{} enc{} dec{}, vocab {}→{}, max_len {})",
            c.d_model, c.d_ff, c.heads, c.enc_layers, c.dec_layers, c.src_vocab, c.tgt_vocab, c.max_len
        )
    }
}

// ---------------------------------------------------------------------------
// Metrics and map utilities
// ---------------------------------------------------------------------------

/// The attribution method names.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::all().into_iter().map(|m| m.name()).collect()
}

/// The composition operator names.
#[pyfunction]
fn compose_ops() -> Vec<&'static str> {
    ComposeOp::all().into_iter().map(|o| o.name()).collect()
}

/// The injection site names.
#[pyfunction]
fn sites() -> Vec<&'static str> {
    vec![Site::EncoderSelf.name(), Site::Cross.name()]
}

/// Column-wise min–max normalization to `[0, 1]`; constant columns to zero.
#[pyfunction]
fn normalize_map(map: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = normalize_columns(&to_matrix(&map)?).map_err(oops)?;
    Ok(from_matrix(&t))
}

/// Mean Shannon entropy of the map's columns after normalizing each to a
/// distribution.
#[pyfunction]
fn column_entropy(map: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::column_entropy(&to_matrix(&map)?).map_err(oops)
}

/// Mean per-column overlap of the top-`k` row sets of `map` and `reference`.
#[pyfunction]
fn overlap_at_k(map: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    metrics::overlap_at_k(&to_matrix(&map)?, &to_matrix(&reference)?, k).map_err(oops)
}

/// Mean per-column rank correlation restricted to the reference's top-`k` rows.
#[pyfunction]
fn kendall_tau_at_k(map: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    metrics::kendall_tau_at_k(&to_matrix(&map)?, &to_matrix(&reference)?, k).map_err(oops)
}

/// Tie-corrected rank correlation of two sequences.
#[pyfunction]
fn kendall_tau_b(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err("sequences must have equal length"));
    }
    Ok(metrics::kendall_tau_b(&xs, &ys))
}

/// Mean row-wise KL divergence between two maps of equal shape (rows
/// normalized to distributions with a small floor).
#[pyfunction]
fn mean_row_kl(p: Vec<Vec<f64>>, q: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::mean_row_kl(&to_matrix(&p)?, &to_matrix(&q)?).map_err(oops)
}

/// Pearson correlation of two sequences.
#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&xs, &ys).map_err(oops)
}

/// Spearman rank correlation of two sequences.
#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&xs, &ys).map_err(oops)
}

/// Pearson correlation over the flattened cells of two maps.
#[pyfunction]
fn map_pearson(map: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::map_pearson(&to_matrix(&map)?, &to_matrix(&reference)?).map_err(oops)
}

/// Spearman correlation over the flattened cells of two maps.
#[pyfunction]
fn map_spearman(map: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::map_spearman(&to_matrix(&map)?, &to_matrix(&reference)?).map_err(oops)
}

/// Corpus-level BLEU (percent) of hypothesis token lists against references.
#[pyfunction]
fn corpus_bleu(hyps: Vec<Vec<String>>, refs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::corpus_bleu(&hyps, &refs).map_err(oops)
}

/// Corpus-level character n-gram F-score (percent).
#[pyfunction]
fn corpus_chrf(hyps: Vec<Vec<String>>, refs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::corpus_chrf(&hyps, &refs).map_err(oops)
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

fn parse_source(source: &str, method: Option<&str>, origin: TargetOrigin) -> PyResult<MapSource> {
    match source {
        "none" => Ok(MapSource::None),
        "random" => Ok(MapSource::Random),
        "diagonal" => Ok(MapSource::Diagonal),
        "gold_alignment" | "gold" => Ok(MapSource::GoldAlignment),
        "file" => {
            let name = method.ok_or_else(|| {
                PyValueError::new_err("source 'file' needs a method name")
            })?;
            Ok(MapSource::File { origin, method: parse_method(name)? })
        }
        other => Err(PyValueError::new_err(format!(
            "unknown map source '{other}' (expected none, file, random, diagonal or gold_alignment)"
        ))),
    }
}

fn student_spec(
    config: &Config,
    source: &str,
    method: Option<&str>,
    op: &str,
    site: &str,
    mask: &str,
    seed: u64,
) -> PyResult<StudentSpec> {
    Ok(StudentSpec {
        source: parse_source(source, method, config.inner.target_origin)?,
        op: ComposeOp::from_name(op).map_err(oops)?,
        site: Site::from_name(site).map_err(oops)?,
        mask: HeadMaskKind::from_name(mask).map_err(oops)?,
        seed,
    })
}

/// Generate the task and train the teacher into `run_dir`.
#[pyfunction]
fn run_train_teacher(config: &Config, run_dir: PathBuf) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    json(&stage_train_teacher(&config.inner, &run, |_| {}).map_err(oops)?)
}

/// Extract attribution maps for every configured method into `run_dir`.
#[pyfunction]
fn run_extract(config: &Config, run_dir: PathBuf) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    json(&stage_extract(&config.inner, &run, |_| {}).map_err(oops)?)
}

/// Train one student cell and return its evaluation record.
#[pyfunction]
#[pyo3(signature = (config, run_dir, source, method=None, op="multiply", site="encoder_self", mask="all", seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_train_student(
    config: &Config,
    run_dir: PathBuf,
    source: &str,
    method: Option<&str>,
    op: &str,
    site: &str,
    mask: &str,
    seed: u64,
) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    let spec = student_spec(config, source, method, op, site, mask, seed)?;
    json(&stage_train_student(&config.inner, &run, &spec, |_| {}).map_err(oops)?)
}

/// Re-evaluate an already-trained student cell.
#[pyfunction]
#[pyo3(signature = (config, run_dir, source, method=None, op="multiply", site="encoder_self", mask="all", seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    config: &Config,
    run_dir: PathBuf,
    source: &str,
    method: Option<&str>,
    op: &str,
    site: &str,
    mask: &str,
    seed: u64,
) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    let spec = student_spec(config, source, method, op, site, mask, seed)?;
    json(&stage_evaluate(&config.inner, &run, &spec).map_err(oops)?)
}

/// Train the map-reconstruction network for one method's extracted maps.
#[pyfunction]
fn run_train_attributor(config: &Config, run_dir: PathBuf, method: &str) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    let method = parse_method(method)?;
    json(
        &stage_train_attributor(&config.inner, &run, config.inner.target_origin, method, |_| {})
            .map_err(oops)?,
    )
}

/// Injection identity checks against the trained teacher.
#[pyfunction]
#[pyo3(signature = (config, run_dir, op="multiply", site="encoder_self", mask="all"))]
fn run_sanity(
    config: &Config,
    run_dir: PathBuf,
    op: &str,
    site: &str,
    mask: &str,
) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    json(
        &stage_sanity(
            &config.inner,
            &run,
            ComposeOp::from_name(op).map_err(oops)?,
            Site::from_name(site).map_err(oops)?,
            HeadMaskKind::from_name(mask).map_err(oops)?,
            |_| {},
        )
        .map_err(oops)?,
    )
}

/// Aggregate all recorded stage results in `run_dir` into the final report.
#[pyfunction]
fn run_report(config: &Config, run_dir: PathBuf) -> PyResult<String> {
    let run = RunDir::new(run_dir);
    json(&stage_report(&config.inner, &run).map_err(oops)?)
}

// ---------------------------------------------------------------------------
// Module
// ---------------------------------------------------------------------------

#[pymodule]
fn attrinject(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add_function(wrap_pyfunction!(compose_ops, m)?)?;
    m.add_function(wrap_pyfunction!(sites, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_map, m)?)?;
    m.add_function(wrap_pyfunction!(column_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_b, m)?)?;
    m.add_function(wrap_pyfunction!(mean_row_kl, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(map_pearson, m)?)?;
    m.add_function(wrap_pyfunction!(map_spearman, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_chrf, m)?)?;
    m.add_function(wrap_pyfunction!(run_train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(run_extract, m)?)?;
    m.add_function(wrap_pyfunction!(run_train_student, m)?)?;
    m.add_function(wrap_pyfunction!(run_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_train_attributor, m)?)?;
    m.add_function(wrap_pyfunction!(run_sanity, m)?)?;
    m.add_function(wrap_pyfunction!(run_report, m)?)?;
    Ok(())
}
