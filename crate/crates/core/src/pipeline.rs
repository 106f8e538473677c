//! Experiment orchestration over persistent artifacts.
//!
//! A run lives in one output directory with a fixed layout:
//!
//! ```text
//! <root>/
//!   experiment.json                    launch configuration
//!   corpus.json                        generated parallel corpus
//!   teacher.ckpt                       trained teacher weights
//!   attributions/<origin>.<method>.jsonl
//!   students/<tag>.ckpt                one per injection configuration
//!   evals/<tag>.json                   test metrics per student
//!   attributors/<origin>.<method>.ckpt / .stats.json
//!   report.txt, report.json            final tables and correlations
//!   manifest.jsonl                     append-only stage log
//! ```
//!
//! Stages are independent commands over this directory: each one re-derives
//! the train/valid/test split from the persisted corpus and the split seed,
//! so artifacts can be deleted and rebuilt selectively without disturbing
//! the others.  Attribution maps are stored un-normalised; conditioning
//! (column normalisation, orientation, padding) happens when a map is
//! turned into an injectable square, so one extraction serves every
//! operator/site combination.

use crate::attribution::{attribute, AttributionConfig, Method};
use crate::attributor::{
    evaluate_attributor, train_attributor, AttributorConfig, AttributorCurves, AttributorModel,
    AttributorTrainConfig, MapExample, MapStats,
};
use crate::checkpoint::{load_model, save_model};
use crate::data::{fingerprint_json, generate_task, split_indices, Corpus, TaskSpec, EOS};
use crate::error::{Error, Result};
use crate::injection::{diagonal_square, prepare_square, random_square};
use crate::metrics::{column_entropy, corpus_bleu, corpus_chrf, pearson, spearman};
use crate::rng::Rng;
use crate::tape::ComposeOp;
use crate::tensor::Tensor;
use crate::train::{evaluate_ce, token_accuracy, train_model, MapBank, TrainConfig, TrainReport};
use crate::transformer::{GenerationInjection, ModelConfig, Seq2SeqModel, Site};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Version tag stamped into every attribution record.
pub const ATTRIBUTION_FILE_VERSION: u32 = 1;

/// Teacher validation accuracy below this is recorded as a warning (the run
/// still continues — a weak teacher merely weakens downstream signal).
pub const TEACHER_ACCURACY_WARN: f64 = 0.90;

/// Top-k used for reconstruction statistics in reports.
pub const REPORT_TOP_K: usize = 3;

const GEN_CHUNK: usize = 32;

// ---------------------------------------------------------------------------
// Attribution record files
// ---------------------------------------------------------------------------

/// Whose target sequence a map explains: the reference translation or the
/// teacher's own greedy output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOrigin {
    Gold,
    TeacherGenerated,
}

impl TargetOrigin {
    pub fn name(self) -> &'static str {
        match self {
            TargetOrigin::Gold => "gold",
            TargetOrigin::TeacherGenerated => "teacher_generated",
        }
    }

    pub fn from_name(s: &str) -> Result<TargetOrigin> {
        match s {
            "gold" => Ok(TargetOrigin::Gold),
            "teacher_generated" => Ok(TargetOrigin::TeacherGenerated),
            other => Err(Error::InvalidInput(format!(
                "unknown target origin '{other}' (expected gold or teacher_generated)"
            ))),
        }
    }
}

/// One attribution map with enough context to be consumed independently of
/// the corpus: token strings on both axes and the raw matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub version: u32,
    /// Index of the pair in the corpus the map was extracted from.
    pub pair_id: usize,
    pub method: Method,
    pub target_origin: TargetOrigin,
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    /// `[source positions, target positions]`.
    pub shape: [usize; 2],
    /// Row-major values, one row per source position.
    pub matrix: Vec<f64>,
    /// Whether the values have already been column-normalised.
    pub normalized: bool,
}

impl AttributionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.version != ATTRIBUTION_FILE_VERSION {
            return Err(Error::InvalidInput(format!(
                "attribution record version {} (supported: {ATTRIBUTION_FILE_VERSION})",
                self.version
            )));
        }
        let [j, k] = self.shape;
        if j * k != self.matrix.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} inconsistent with {} matrix values",
                self.shape,
                self.matrix.len()
            )));
        }
        if j != self.source_tokens.len() || k != self.target_tokens.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} inconsistent with {} source / {} target tokens",
                self.shape,
                self.source_tokens.len(),
                self.target_tokens.len()
            )));
        }
        if let Some(v) = self.matrix.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite attribution value {v} in pair {}",
                self.pair_id
            )));
        }
        Ok(())
    }

    /// The map as a `[source, target]` tensor.
    pub fn matrix_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(vec![self.shape[0], self.shape[1]], self.matrix.clone())
    }
}

/// Write one JSON record per line.  All records are validated first; the
/// file is only touched when every record is sound.
pub fn write_attribution_file(path: &Path, records: &[AttributionRecord]) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        rec.validate()?;
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    write_text(path, &out)
}

/// Read and validate a record-per-line attribution file.  Errors carry the
/// offending line number; duplicate pair ids are rejected.
pub fn read_attribution_file(path: &Path) -> Result<Vec<AttributionRecord>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let context = |detail: String| Error::MalformedFile {
            path: format!("{}:{}", path.display(), i + 1),
            detail,
        };
        let rec: AttributionRecord =
            serde_json::from_str(line).map_err(|e| context(e.to_string()))?;
        rec.validate().map_err(|e| context(e.to_string()))?;
        if !seen.insert(rec.pair_id) {
            return Err(context(format!("duplicate pair id {}", rec.pair_id)));
        }
        records.push(rec);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Architecture of a translation model, minus the corpus-determined
/// vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
}

impl ModelShape {
    pub fn to_model_config(self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            max_len: self.max_len,
        }
    }
}

/// Architecture of the map-reconstruction network, minus vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributorShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub gate_hidden: usize,
    pub max_len: usize,
}

impl AttributorShape {
    pub fn to_attributor_config(self, src_vocab: usize, tgt_vocab: usize) -> AttributorConfig {
        AttributorConfig {
            src_vocab,
            tgt_vocab,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            gate_hidden: self.gate_hidden,
            max_len: self.max_len,
        }
    }
}

/// Which heads receive an injected map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMaskKind {
    /// Every head.
    All,
    /// Heads 0, 2, 4, …; the rest keep their native scores.
    Alternating,
}

impl HeadMaskKind {
    pub fn mask(self, heads: usize) -> Vec<bool> {
        match self {
            HeadMaskKind::All => crate::injection::full_head_mask(heads),
            HeadMaskKind::Alternating => crate::injection::alternating_head_mask(heads),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMaskKind::All => "all",
            HeadMaskKind::Alternating => "alternating",
        }
    }

    pub fn from_name(s: &str) -> Result<HeadMaskKind> {
        match s {
            "all" => Ok(HeadMaskKind::All),
            "alternating" => Ok(HeadMaskKind::Alternating),
            other => Err(Error::InvalidInput(format!(
                "unknown head mask '{other}' (expected all or alternating)"
            ))),
        }
    }
}

/// Everything a full run needs.  The output directory is deliberately not
/// part of the config so its fingerprint is location-independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,
    pub teacher: ModelShape,
    pub student: ModelShape,
    pub attributor: AttributorShape,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub attributor_train: AttributorTrainConfig,
    pub methods: Vec<Method>,
    pub operators: Vec<ComposeOp>,
    pub sites: Vec<Site>,
    pub head_masks: Vec<HeadMaskKind>,
    pub target_origin: TargetOrigin,
    pub attribution: AttributionConfig,
    /// Base seed for model initialisation and training schedules.
    pub seed: u64,
}

impl ExperimentConfig {
    /// Default grid: adjacent-swap synthetic task, full method and operator
    /// matrix, the sizes the whole framework is tuned for on one CPU core.
    pub fn desk() -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec {
                vocab_words: 64,
                min_len: 4,
                max_len: 10,
                reorder: crate::data::Reorder::AdjacentSwap,
                pairs: 8000,
                seed: 11,
            },
            valid_frac: 0.1,
            test_frac: 0.1,
            split_seed: 2,
            teacher: ModelShape {
                d_model: 64,
                d_ff: 128,
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
                max_len: 12,
            },
            student: ModelShape {
                d_model: 64,
                d_ff: 128,
                heads: 4,
                enc_layers: 2,
                dec_layers: 2,
                max_len: 12,
            },
            attributor: AttributorShape {
                d_model: 64,
                d_ff: 128,
                heads: 8,
                enc_layers: 3,
                dec_layers: 3,
                gate_hidden: 64,
                max_len: 12,
            },
            teacher_train: TrainConfig::default(),
            student_train: TrainConfig {
                epochs: 50,
                patience: 3,
                ..TrainConfig::default()
            },
            attributor_train: AttributorTrainConfig::default(),
            methods: Method::all().to_vec(),
            operators: ComposeOp::all().to_vec(),
            sites: vec![Site::EncoderSelf, Site::Cross],
            head_masks: vec![HeadMaskKind::All, HeadMaskKind::Alternating],
            target_origin: TargetOrigin::Gold,
            attribution: AttributionConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Pipeline(msg));
        if !(self.valid_frac > 0.0 && self.test_frac > 0.0) {
            return fail("validation and test fractions must be positive".into());
        }
        if self.valid_frac + self.test_frac >= 1.0 {
            return fail(format!(
                "validation + test fractions must leave room for training, got {} + {}",
                self.valid_frac, self.test_frac
            ));
        }
        for (label, s) in [("teacher", self.teacher), ("student", self.student)] {
            if s.d_model == 0 || s.heads == 0 || s.d_model % s.heads != 0 {
                return fail(format!(
                    "{label}: width {} must be a positive multiple of {} heads",
                    s.d_model, s.heads
                ));
            }
            if s.enc_layers == 0 || s.dec_layers == 0 || s.d_ff == 0 {
                return fail(format!("{label}: layer counts and feed-forward width must be positive"));
            }
            if s.max_len < self.task.max_len + 1 {
                return fail(format!(
                    "{label}: max_len {} cannot hold a {}-word sentence plus its end marker",
                    s.max_len, self.task.max_len
                ));
            }
        }
        let a = self.attributor;
        if a.d_model == 0 || a.heads == 0 || a.d_model % a.heads != 0 {
            return fail(format!(
                "attributor: width {} must be a positive multiple of {} heads",
                a.d_model, a.heads
            ));
        }
        if a.enc_layers == 0 || a.dec_layers == 0 || a.d_ff == 0 || a.gate_hidden == 0 {
            return fail("attributor: layer counts and hidden widths must be positive".into());
        }
        if a.max_len < self.task.max_len + 1 {
            return fail(format!(
                "attributor: max_len {} cannot hold a {}-word sentence plus its end marker",
                a.max_len, self.task.max_len
            ));
        }
        if self.target_origin == TargetOrigin::TeacherGenerated {
            if self.student.max_len < self.teacher.max_len {
                return fail(format!(
                    "teacher-generated targets can reach {} tokens but the student only holds {}",
                    self.teacher.max_len, self.student.max_len
                ));
            }
            if a.max_len < self.teacher.max_len {
                return fail(format!(
                    "teacher-generated targets can reach {} tokens but the attributor only holds {}",
                    self.teacher.max_len, a.max_len
                ));
            }
        }
        no_dups("methods", &self.methods.iter().map(|m| m.name()).collect::<Vec<_>>())?;
        no_dups("operators", &self.operators.iter().map(|o| o.name()).collect::<Vec<_>>())?;
        no_dups("sites", &self.sites.iter().map(|s| s.name()).collect::<Vec<_>>())?;
        no_dups("head_masks", &self.head_masks.iter().map(|m| m.name()).collect::<Vec<_>>())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Canonical content hash; identical configs fingerprint identically
    /// regardless of where or when they run.
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_json(self)
    }
}

fn no_dups(label: &str, names: &[&str]) -> Result<()> {
    let mut sorted = names.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Pipeline(format!("{label} list contains duplicates: {names:?}")));
    }
    if names.is_empty() {
        return Err(Error::Pipeline(format!("{label} list is empty")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run directory and manifest
// ---------------------------------------------------------------------------

/// Path logic for one run's output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Create the directory skeleton (idempotent).
    pub fn create(&self) -> Result<()> {
        for sub in ["", "attributions", "students", "evals", "attributors"] {
            let dir = self.root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("experiment.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.json")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }

    pub fn attribution(&self, origin: TargetOrigin, method: Method) -> PathBuf {
        self.root
            .join("attributions")
            .join(format!("{}.{}.jsonl", origin.name(), method.name()))
    }

    pub fn student(&self, tag: &str) -> PathBuf {
        self.root.join("students").join(format!("{tag}.ckpt"))
    }

    pub fn eval(&self, tag: &str) -> PathBuf {
        self.root.join("evals").join(format!("{tag}.json"))
    }

    pub fn attributor_model(&self, origin: TargetOrigin, method: Method) -> PathBuf {
        self.root
            .join("attributors")
            .join(format!("{}.{}.ckpt", origin.name(), method.name()))
    }

    pub fn attributor_stats(&self, origin: TargetOrigin, method: Method) -> PathBuf {
        self.root
            .join("attributors")
            .join(format!("{}.{}.stats.json", origin.name(), method.name()))
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    /// Root-relative form used in the manifest, so a run directory can be
    /// moved wholesale.
    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

/// One line of the append-only stage log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub timestamp_secs: u64,
    pub config_fingerprint: String,
    /// Paths relative to the run root; each must exist when appended.
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

/// Append one entry, enforcing that every artifact it names exists.
pub fn append_manifest(root: &Path, entry: &ManifestEntry) -> Result<()> {
    for a in &entry.artifacts {
        let p = root.join(a);
        if !p.exists() {
            return Err(Error::Pipeline(format!(
                "manifest entry for stage '{}' names missing artifact {}",
                entry.stage,
                p.display()
            )));
        }
    }
    let path = root.join("manifest.jsonl");
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(line.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// All entries in append order; an absent manifest reads as empty.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.jsonl");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(line).map_err(|e| Error::MalformedFile {
                path: format!("{}:{}", path.display(), i + 1),
                detail: e.to_string(),
            })?,
        );
    }
    Ok(entries)
}

fn record_stage(
    run: &RunDir,
    cfg: &ExperimentConfig,
    stage: &str,
    artifacts: &[PathBuf],
    summary: serde_json::Value,
) -> Result<()> {
    let entry = ManifestEntry {
        stage: stage.to_string(),
        timestamp_secs: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config_fingerprint: cfg.fingerprint()?,
        artifacts: artifacts.iter().map(|p| run.rel(p)).collect(),
        summary,
    };
    append_manifest(run.root(), &entry)
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_corpus(run: &RunDir) -> Result<Corpus> {
    let path = run.corpus();
    if !path.exists() {
        return Err(Error::Pipeline(format!(
            "corpus not found at {} — run train-teacher first",
            path.display()
        )));
    }
    Corpus::load(&path)
}

fn load_teacher(run: &RunDir, corpus: &Corpus) -> Result<Seq2SeqModel> {
    let path = run.teacher();
    if !path.exists() {
        return Err(Error::Pipeline(format!(
            "teacher checkpoint not found at {} — run train-teacher first",
            path.display()
        )));
    }
    let model = load_model(&path)?;
    if model.config.src_vocab != corpus.src_vocab.len()
        || model.config.tgt_vocab != corpus.tgt_vocab.len()
    {
        return Err(Error::Pipeline(format!(
            "teacher checkpoint vocabulary ({} source, {} target) does not match the corpus ({}, {})",
            model.config.src_vocab,
            model.config.tgt_vocab,
            corpus.src_vocab.len(),
            corpus.tgt_vocab.len()
        )));
    }
    Ok(model)
}

fn splits(cfg: &ExperimentConfig, corpus: &Corpus) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    split_indices(
        corpus.examples.len(),
        cfg.valid_frac,
        cfg.test_frac,
        cfg.split_seed,
    )
}

fn encode_pairs(corpus: &Corpus, indices: &[usize]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    indices
        .iter()
        .map(|&i| {
            let ex = &corpus.examples[i];
            Ok((corpus.encode_source(ex)?, corpus.encode_target(ex)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stage: train-teacher
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub train: TrainReport,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Set when validation accuracy ends below [`TEACHER_ACCURACY_WARN`];
    /// the stage still succeeds.
    pub warning: Option<String>,
}

/// Generate the corpus, train the teacher on it, and persist both.
pub fn stage_train_teacher(
    cfg: &ExperimentConfig,
    run: &RunDir,
    mut log: impl FnMut(&str),
) -> Result<TeacherSummary> {
    cfg.validate()?;
    run.create()?;
    cfg.save(&run.config())?;
    let corpus = generate_task(&cfg.task)?;
    corpus.save(&run.corpus())?;
    let (train_ix, valid_ix, test_ix) = splits(cfg, &corpus);
    let train_pairs = encode_pairs(&corpus, &train_ix)?;
    let valid_pairs = encode_pairs(&corpus, &valid_ix)?;
    let test_pairs = encode_pairs(&corpus, &test_ix)?;
    let mc = cfg
        .teacher
        .to_model_config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
    let mut model = Seq2SeqModel::init(mc, cfg.seed)?;
    let train = train_model(
        &mut model,
        &train_pairs,
        &valid_pairs,
        None,
        None,
        &cfg.teacher_train,
        &mut log,
    )?;
    let batch = cfg.teacher_train.batch_size;
    let val_accuracy = token_accuracy(&model, &valid_pairs, None, batch)?;
    let test_accuracy = token_accuracy(&model, &test_pairs, None, batch)?;
    let warning = (val_accuracy < TEACHER_ACCURACY_WARN).then(|| {
        format!(
            "teacher validation accuracy {val_accuracy:.3} is below {TEACHER_ACCURACY_WARN}; \
             downstream maps will be noisy"
        )
    });
    if let Some(w) = &warning {
        log(w);
    }
    save_model(&model, &run.teacher())?;
    let summary = TeacherSummary {
        train,
        val_accuracy,
        test_accuracy,
        warning,
    };
    record_stage(
        run,
        cfg,
        "train-teacher",
        &[run.config(), run.corpus(), run.teacher()],
        serde_json::to_value(&summary)?,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: extract
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodExtract {
    pub method: Method,
    pub records: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub origin: TargetOrigin,
    pub pairs: usize,
    pub per_method: Vec<MethodExtract>,
}

/// Extract one attribution file per configured method, covering every
/// corpus pair.  A failing pair is skipped, logged and counted rather than
/// aborting the file.
pub fn stage_extract(
    cfg: &ExperimentConfig,
    run: &RunDir,
    mut log: impl FnMut(&str),
) -> Result<ExtractSummary> {
    cfg.validate()?;
    run.create()?;
    let corpus = load_corpus(run)?;
    let model = load_teacher(run, &corpus)?;
    let src_ids: Vec<Vec<usize>> = corpus
        .examples
        .iter()
        .map(|ex| corpus.encode_source(ex))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<usize>> = match cfg.target_origin {
        TargetOrigin::Gold => corpus
            .examples
            .iter()
            .map(|ex| corpus.encode_target(ex))
            .collect::<Result<_>>()?,
        TargetOrigin::TeacherGenerated => {
            let mut out = Vec::with_capacity(src_ids.len());
            for chunk in src_ids.chunks(GEN_CHUNK) {
                let generated = model.generate(chunk, None, model.config.max_len - 1)?;
                out.extend(generated.into_iter().map(|mut ids| {
                    ids.push(EOS);
                    ids
                }));
            }
            out
        }
    };
    let mut per_method = Vec::new();
    let mut artifacts = Vec::new();
    for &method in &cfg.methods {
        let mut records = Vec::with_capacity(src_ids.len());
        let mut skipped = 0usize;
        for (pair_id, (src, tgt)) in src_ids.iter().zip(&targets).enumerate() {
            let acfg = AttributionConfig {
                seed: cfg.attribution.seed.wrapping_add(pair_id as u64),
                ..cfg.attribution.clone()
            };
            match attribute(&model, src, tgt, method, &acfg) {
                Ok(map) => records.push(AttributionRecord {
                    version: ATTRIBUTION_FILE_VERSION,
                    pair_id,
                    method,
                    target_origin: cfg.target_origin,
                    source_tokens: corpus.src_vocab.decode(src),
                    target_tokens: corpus.tgt_vocab.decode(tgt),
                    shape: [map.rows(), map.cols()],
                    matrix: map.data().to_vec(),
                    normalized: false,
                }),
                Err(e) => {
                    skipped += 1;
                    log(&format!("{}: pair {pair_id} skipped: {e}", method.name()));
                }
            }
        }
        let path = run.attribution(cfg.target_origin, method);
        write_attribution_file(&path, &records)?;
        log(&format!(
            "{}: {} records, {} skipped -> {}",
            method.name(),
            records.len(),
            skipped,
            path.display()
        ));
        per_method.push(MethodExtract {
            method,
            records: records.len(),
            skipped,
        });
        artifacts.push(path);
    }
    let summary = ExtractSummary {
        origin: cfg.target_origin,
        pairs: src_ids.len(),
        per_method,
    };
    record_stage(run, cfg, "extract", &artifacts, serde_json::to_value(&summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: train-student / evaluate
// ---------------------------------------------------------------------------

/// Where a student's injected maps come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// No injection anywhere — the paired baseline.
    None,
    /// An attribution file produced by the extract stage.
    File {
        origin: TargetOrigin,
        method: Method,
    },
    /// Structure-free control: per-pair uniform noise squares.
    Random,
    /// Position-identity control: diagonal squares.
    Diagonal,
    /// Oracle: the task's gold word alignment.
    GoldAlignment,
}

impl MapSource {
    pub fn label(&self) -> String {
        match self {
            MapSource::None => "none".to_string(),
            MapSource::File { origin, method } => {
                format!("{}.{}", origin.name(), method.name())
            }
            MapSource::Random => "random".to_string(),
            MapSource::Diagonal => "diagonal".to_string(),
            MapSource::GoldAlignment => "gold_alignment".to_string(),
        }
    }
}

/// One cell of the injection grid: a map source composed at a site under a
/// head mask, trained from a given seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub source: MapSource,
    pub op: ComposeOp,
    pub site: Site,
    pub mask: HeadMaskKind,
    pub seed: u64,
}

impl StudentSpec {
    /// A baseline paired with any injected run of the same seed; operator,
    /// site and mask are irrelevant without maps.
    pub fn baseline(seed: u64) -> StudentSpec {
        StudentSpec {
            source: MapSource::None,
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::All,
            seed,
        }
    }

    /// Filesystem-safe identity used for checkpoint and eval file names.
    pub fn tag(&self) -> String {
        match &self.source {
            MapSource::None => format!("baseline.seed{}", self.seed),
            s => format!(
                "{}.{}.{}.{}.seed{}",
                s.label(),
                self.op.name(),
                self.site.name(),
                self.mask.name(),
                self.seed
            ),
        }
    }
}

/// Test-set metrics for one trained student.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub tag: String,
    pub spec: StudentSpec,
    pub test_bleu: f64,
    pub test_chrf: f64,
    pub test_ce: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub best_val_ce: f64,
}

/// Per-corpus-index training material for one student configuration.
struct StudentMaterial {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    /// Reference word sequences for translation scoring (no specials).
    refs: Vec<Vec<String>>,
    /// Oriented `[l, l]` squares, present unless the source is `None`.
    squares: Option<Vec<Tensor>>,
}

fn student_material(
    cfg: &ExperimentConfig,
    run: &RunDir,
    corpus: &Corpus,
    spec: &StudentSpec,
) -> Result<StudentMaterial> {
    let l = cfg.student.max_len;
    let n = corpus.examples.len();
    let corpus_pairs = || -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        corpus
            .examples
            .iter()
            .map(|ex| Ok((corpus.encode_source(ex)?, corpus.encode_target(ex)?)))
            .collect()
    };
    let corpus_refs = || corpus.examples.iter().map(|ex| ex.target.clone()).collect();
    match &spec.source {
        MapSource::None => Ok(StudentMaterial {
            pairs: corpus_pairs()?,
            refs: corpus_refs(),
            squares: None,
        }),
        MapSource::Random => {
            let mut parent = Rng::new(spec.seed).split("control-maps");
            let squares = (0..n)
                .map(|i| {
                    let mut rng = parent.split(&format!("pair{i}"));
                    random_square(&mut rng, l)
                })
                .collect();
            Ok(StudentMaterial {
                pairs: corpus_pairs()?,
                refs: corpus_refs(),
                squares: Some(squares),
            })
        }
        MapSource::Diagonal => Ok(StudentMaterial {
            pairs: corpus_pairs()?,
            refs: corpus_refs(),
            squares: Some(vec![diagonal_square(l); n]),
        }),
        MapSource::GoldAlignment => {
            let squares = corpus
                .examples
                .iter()
                .enumerate()
                .map(|(i, ex)| {
                    let gold = ex.alignment_with_eos().ok_or_else(|| {
                        Error::Pipeline(format!("corpus pair {i} carries no gold alignment"))
                    })?;
                    prepare_square(&gold, spec.site, l)
                })
                .collect::<Result<_>>()?;
            Ok(StudentMaterial {
                pairs: corpus_pairs()?,
                refs: corpus_refs(),
                squares: Some(squares),
            })
        }
        MapSource::File { origin, method } => {
            let path = run.attribution(*origin, *method);
            if !path.exists() {
                return Err(Error::Pipeline(format!(
                    "attribution file not found at {} — run extract first",
                    path.display()
                )));
            }
            let records = read_attribution_file(&path)?;
            let mut by_id: BTreeMap<usize, &AttributionRecord> = BTreeMap::new();
            for rec in &records {
                if rec.method != *method || rec.target_origin != *origin {
                    return Err(Error::Pipeline(format!(
                        "{}: record for pair {} claims method {} / origin {}, expected {} / {}",
                        path.display(),
                        rec.pair_id,
                        rec.method.name(),
                        rec.target_origin.name(),
                        method.name(),
                        origin.name()
                    )));
                }
                by_id.insert(rec.pair_id, rec);
            }
            let mut pairs = Vec::with_capacity(n);
            let mut refs = Vec::with_capacity(n);
            let mut squares = Vec::with_capacity(n);
            for (i, ex) in corpus.examples.iter().enumerate() {
                let rec = by_id.get(&i).ok_or_else(|| {
                    Error::Pipeline(format!(
                        "{} does not cover pair {i}; student training requires every pair \
                         (extraction may have skipped it)",
                        path.display()
                    ))
                })?;
                let src = corpus.encode_source(ex)?;
                if rec.source_tokens != corpus.src_vocab.decode(&src) {
                    return Err(Error::Pipeline(format!(
                        "{}: source tokens of pair {i} do not match the corpus",
                        path.display()
                    )));
                }
                let tgt = corpus.tgt_vocab.encode_strict(&rec.target_tokens)?;
                let mut words = rec.target_tokens.clone();
                if words.last().map(String::as_str) == Some("<eos>") {
                    words.pop();
                }
                pairs.push((src, tgt));
                refs.push(words);
                squares.push(prepare_square(&rec.matrix_tensor()?, spec.site, l)?);
            }
            Ok(StudentMaterial {
                pairs,
                refs,
                squares: Some(squares),
            })
        }
    }
}

fn pick<T: Clone>(items: &[T], indices: &[usize]) -> Vec<T> {
    indices.iter().map(|&i| items[i].clone()).collect()
}

fn eval_student(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    pairs: &[(Vec<usize>, Vec<usize>)],
    refs: &[Vec<String>],
    squares: Option<&[Tensor]>,
    spec: &StudentSpec,
    batch_size: usize,
) -> Result<(f64, f64, f64, f64)> {
    let heads = model.config.heads;
    let bank = squares.map(|s| MapBank {
        site: spec.site,
        compose: spec.op,
        head_mask: spec.mask.mask(heads),
        squares: s.to_vec(),
    });
    let ce = evaluate_ce(model, pairs, bank.as_ref(), batch_size)?;
    let accuracy = token_accuracy(model, pairs, bank.as_ref(), batch_size)?;
    let max_steps = model.config.max_len - 1;
    let mut hyps: Vec<Vec<String>> = Vec::with_capacity(pairs.len());
    let mut start = 0;
    while start < pairs.len() {
        let end = (start + GEN_CHUNK).min(pairs.len());
        let srcs: Vec<Vec<usize>> = pairs[start..end].iter().map(|p| p.0.clone()).collect();
        let injection = squares.map(|s| GenerationInjection {
            site: spec.site,
            compose: spec.op,
            head_mask: spec.mask.mask(heads),
            squares: s[start..end].to_vec(),
        });
        for ids in model.generate(&srcs, injection.as_ref(), max_steps)? {
            hyps.push(corpus.tgt_vocab.decode(&ids));
        }
        start = end;
    }
    let bleu = corpus_bleu(&hyps, refs)?;
    let chrf = corpus_chrf(&hyps, refs)?;
    Ok((bleu, chrf, ce, accuracy))
}

/// Train one student under the given injection spec and evaluate it on the
/// test split (teacher-forced cross-entropy/accuracy plus free-running
/// translation scores, maps active in both).
pub fn stage_train_student(
    cfg: &ExperimentConfig,
    run: &RunDir,
    spec: &StudentSpec,
    mut log: impl FnMut(&str),
) -> Result<EvalRecord> {
    cfg.validate()?;
    run.create()?;
    let corpus = load_corpus(run)?;
    let material = student_material(cfg, run, &corpus, spec)?;
    let (train_ix, valid_ix, test_ix) = splits(cfg, &corpus);
    let train_pairs = pick(&material.pairs, &train_ix);
    let valid_pairs = pick(&material.pairs, &valid_ix);
    let test_pairs = pick(&material.pairs, &test_ix);
    let heads = cfg.student.heads;
    let bank_for = |indices: &[usize]| {
        material.squares.as_ref().map(|sq| MapBank {
            site: spec.site,
            compose: spec.op,
            head_mask: spec.mask.mask(heads),
            squares: pick(sq, indices),
        })
    };
    let mc = cfg
        .student
        .to_model_config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
    let mut model = Seq2SeqModel::init(mc, spec.seed)?;
    let tc = TrainConfig {
        seed: spec.seed,
        ..cfg.student_train.clone()
    };
    let report = train_model(
        &mut model,
        &train_pairs,
        &valid_pairs,
        bank_for(&train_ix).as_ref(),
        bank_for(&valid_ix).as_ref(),
        &tc,
        &mut log,
    )?;
    let tag = spec.tag();
    save_model(&model, &run.student(&tag))?;
    let test_refs = pick(&material.refs, &test_ix);
    let test_squares = material.squares.as_ref().map(|sq| pick(sq, &test_ix));
    let (bleu, chrf, ce, accuracy) = eval_student(
        &model,
        &corpus,
        &test_pairs,
        &test_refs,
        test_squares.as_deref(),
        spec,
        cfg.student_train.batch_size,
    )?;
    let record = EvalRecord {
        tag: tag.clone(),
        spec: spec.clone(),
        test_bleu: bleu,
        test_chrf: chrf,
        test_ce: ce,
        test_accuracy: accuracy,
        epochs_run: report.epochs_run,
        best_val_ce: report.best_val_ce,
    };
    write_text(&run.eval(&tag), &serde_json::to_string_pretty(&record)?)?;
    log(&format!(
        "{tag}: BLEU {bleu:.2}, chrF {chrf:.2}, CE {ce:.4}, accuracy {accuracy:.3}"
    ));
    record_stage(
        run,
        cfg,
        "train-student",
        &[run.student(&tag), run.eval(&tag)],
        serde_json::to_value(&record)?,
    )?;
    Ok(record)
}

/// Re-evaluate an already-trained student from its checkpoint and the
/// persisted attribution artifacts, without touching its weights.
pub fn stage_evaluate(cfg: &ExperimentConfig, run: &RunDir, spec: &StudentSpec) -> Result<EvalRecord> {
    cfg.validate()?;
    let corpus = load_corpus(run)?;
    let tag = spec.tag();
    let ckpt = run.student(&tag);
    if !ckpt.exists() {
        return Err(Error::Pipeline(format!(
            "student checkpoint not found at {} — run train-student first",
            ckpt.display()
        )));
    }
    let model = load_model(&ckpt)?;
    let material = student_material(cfg, run, &corpus, spec)?;
    let (_, _, test_ix) = splits(cfg, &corpus);
    let test_pairs = pick(&material.pairs, &test_ix);
    let test_refs = pick(&material.refs, &test_ix);
    let test_squares = material.squares.as_ref().map(|sq| pick(sq, &test_ix));
    let (bleu, chrf, ce, accuracy) = eval_student(
        &model,
        &corpus,
        &test_pairs,
        &test_refs,
        test_squares.as_deref(),
        spec,
        cfg.student_train.batch_size,
    )?;
    let record = EvalRecord {
        tag: tag.clone(),
        spec: spec.clone(),
        test_bleu: bleu,
        test_chrf: chrf,
        test_ce: ce,
        test_accuracy: accuracy,
        epochs_run: 0,
        best_val_ce: f64::NAN,
    };
    // Keep the richer training-stage record if one exists; otherwise persist
    // this one so the report has something to read.
    let eval_path = run.eval(&tag);
    let stored = if eval_path.exists() {
        let prior: EvalRecord = serde_json::from_str(
            &fs::read_to_string(&eval_path)
                .map_err(|e| Error::io(eval_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::MalformedFile {
            path: eval_path.display().to_string(),
            detail: e.to_string(),
        })?;
        EvalRecord {
            test_bleu: bleu,
            test_chrf: chrf,
            test_ce: ce,
            test_accuracy: accuracy,
            ..prior
        }
    } else {
        record.clone()
    };
    write_text(&eval_path, &serde_json::to_string_pretty(&stored)?)?;
    record_stage(
        run,
        cfg,
        "evaluate",
        &[ckpt, eval_path],
        serde_json::to_value(&stored)?,
    )?;
    Ok(stored)
}

// ---------------------------------------------------------------------------
// Stage: sanity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SanitySummary {
    pub baseline: EvalRecord,
    pub random: EvalRecord,
    pub diagonal: EvalRecord,
}

/// Train the paired baseline plus the two control injections (random and
/// diagonal squares) under one operator/site/mask setting.
pub fn stage_sanity(
    cfg: &ExperimentConfig,
    run: &RunDir,
    op: ComposeOp,
    site: Site,
    mask: HeadMaskKind,
    mut log: impl FnMut(&str),
) -> Result<SanitySummary> {
    let spec = |source: MapSource| StudentSpec {
        source,
        op,
        site,
        mask,
        seed: cfg.seed,
    };
    let baseline = stage_train_student(cfg, run, &StudentSpec::baseline(cfg.seed), &mut log)?;
    let random = stage_train_student(cfg, run, &spec(MapSource::Random), &mut log)?;
    let diagonal = stage_train_student(cfg, run, &spec(MapSource::Diagonal), &mut log)?;
    log(&format!(
        "sanity deltas vs baseline BLEU {:.2}: random {:+.2}, diagonal {:+.2}",
        baseline.test_bleu,
        random.test_bleu - baseline.test_bleu,
        diagonal.test_bleu - baseline.test_bleu
    ));
    Ok(SanitySummary {
        baseline,
        random,
        diagonal,
    })
}

// ---------------------------------------------------------------------------
// Stage: train-attributor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributorSummary {
    pub origin: TargetOrigin,
    pub method: Method,
    /// Validation mean KL of the untrained network, for drop-ratio checks.
    pub init_val_kl: f64,
    pub curves: AttributorCurves,
    pub test: MapStats,
}

/// Train the map-reconstruction network on one method's attribution file
/// and score it on the held-out test pairs.
pub fn stage_train_attributor(
    cfg: &ExperimentConfig,
    run: &RunDir,
    origin: TargetOrigin,
    method: Method,
    mut log: impl FnMut(&str),
) -> Result<AttributorSummary> {
    cfg.validate()?;
    run.create()?;
    let corpus = load_corpus(run)?;
    let path = run.attribution(origin, method);
    if !path.exists() {
        return Err(Error::Pipeline(format!(
            "attribution file not found at {} — run extract first",
            path.display()
        )));
    }
    let records = read_attribution_file(&path)?;
    let by_id: BTreeMap<usize, &AttributionRecord> =
        records.iter().map(|r| (r.pair_id, r)).collect();
    let (train_ix, valid_ix, test_ix) = splits(cfg, &corpus);
    let collect = |indices: &[usize], label: &str| -> Result<Vec<MapExample>> {
        let set: Vec<MapExample> = indices
            .iter()
            .filter_map(|i| by_id.get(i))
            .map(|rec| {
                Ok(MapExample {
                    src: corpus.src_vocab.encode_strict(&rec.source_tokens)?,
                    tgt: corpus.tgt_vocab.encode_strict(&rec.target_tokens)?,
                    map: rec.matrix_tensor()?,
                })
            })
            .collect::<Result<_>>()?;
        if set.is_empty() {
            return Err(Error::Pipeline(format!(
                "{} holds no records for the {label} split",
                path.display()
            )));
        }
        Ok(set)
    };
    let train_set = collect(&train_ix, "training")?;
    let valid_set = collect(&valid_ix, "validation")?;
    let test_set = collect(&test_ix, "test")?;
    let ac = cfg
        .attributor
        .to_attributor_config(corpus.src_vocab.len(), corpus.tgt_vocab.len());
    let mut model = AttributorModel::init(ac, cfg.seed)?;
    let init_val_kl = evaluate_attributor(&model, &valid_set, REPORT_TOP_K)?.mean_kl;
    let curves = train_attributor(&mut model, &train_set, &valid_set, &cfg.attributor_train, &mut log)?;
    let test = evaluate_attributor(&model, &test_set, REPORT_TOP_K)?;
    model.save(&run.attributor_model(origin, method))?;
    let summary = AttributorSummary {
        origin,
        method,
        init_val_kl,
        curves,
        test,
    };
    write_text(
        &run.attributor_stats(origin, method),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    log(&format!(
        "{}.{}: val KL {:.4} -> {:.4}, test KL {:.4}, overlap@{REPORT_TOP_K} {:.3}, tau@{REPORT_TOP_K} {:.3}",
        origin.name(),
        method.name(),
        init_val_kl,
        summary.curves.best_val_kl,
        test.mean_kl,
        test.overlap,
        test.tau
    ));
    record_stage(
        run,
        cfg,
        "train-attributor",
        &[
            run.attributor_model(origin, method),
            run.attributor_stats(origin, method),
        ],
        serde_json::to_value(&summary)?,
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Stage: report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportCell {
    pub op: String,
    pub tag: String,
    pub bleu: f64,
    pub chrf: f64,
    pub bleu_delta: Option<f64>,
    pub chrf_delta: Option<f64>,
    /// `score_Δ` presentation, e.g. `23.41_+5.20`.
    pub bleu_cell: String,
    pub chrf_cell: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportGroup {
    pub site: String,
    pub mask: String,
    pub seed: u64,
    pub baseline_bleu: Option<f64>,
    pub baseline_chrf: Option<f64>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub op: String,
    pub site: String,
    pub mask: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub pearson_bleu_mean_kl: f64,
    pub pearson_bleu_overlap: f64,
    pub pearson_bleu_tau: f64,
    pub spearman_bleu_mean_kl: f64,
    pub spearman_bleu_overlap: f64,
    pub spearman_bleu_tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub origin: String,
    pub method: String,
    /// Mean (over pairs) of the mean column entropy of the column-normalised
    /// map, in nats.
    pub mean_column_entropy: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config_fingerprint: String,
    pub groups: Vec<ReportGroup>,
    pub correlations: Vec<CorrelationReport>,
    pub entropy: Vec<EntropyReport>,
    pub notices: Vec<String>,
}

fn score_cell(score: f64, delta: Option<f64>) -> String {
    match delta {
        Some(d) => format!("{score:.2}_{d:+.2}"),
        None => format!("{score:.2}"),
    }
}

/// Reduce everything the manifest knows about into tables, correlations and
/// entropy summaries, written as aligned text and as JSON.
pub fn stage_report(cfg: &ExperimentConfig, run: &RunDir) -> Result<Report> {
    let entries = read_manifest(run.root())?;
    if entries.is_empty() {
        return Err(Error::Pipeline(format!(
            "no manifest at {} — run some stages first",
            run.manifest().display()
        )));
    }
    let mut notices = Vec::new();

    // Latest eval record per tag, in manifest order so re-runs win.
    let mut evals: BTreeMap<String, EvalRecord> = BTreeMap::new();
    let mut stats: BTreeMap<(String, String), AttributorSummary> = BTreeMap::new();
    let mut attribution_files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in &entries {
        for rel in &entry.artifacts {
            let path = run.root().join(rel);
            if rel.starts_with("evals/") && rel.ends_with(".json") {
                if !path.exists() {
                    notices.push(format!("eval record {rel} named in the manifest is missing"));
                    continue;
                }
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                let rec: EvalRecord =
                    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
                        path: path.display().to_string(),
                        detail: e.to_string(),
                    })?;
                evals.insert(rec.tag.clone(), rec);
            } else if rel.starts_with("attributors/") && rel.ends_with(".stats.json") {
                if !path.exists() {
                    notices.push(format!("attributor stats {rel} named in the manifest is missing"));
                    continue;
                }
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                let s: AttributorSummary =
                    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
                        path: path.display().to_string(),
                        detail: e.to_string(),
                    })?;
                stats.insert((s.origin.name().to_string(), s.method.name().to_string()), s);
            } else if rel.starts_with("attributions/") && rel.ends_with(".jsonl") {
                attribution_files.insert(rel.clone(), path);
            }
        }
    }
    if evals.is_empty() {
        return Err(Error::Pipeline(
            "manifest names no student evaluations; train or evaluate students first".into(),
        ));
    }

    // Baselines keyed by seed.
    let mut baselines: BTreeMap<u64, &EvalRecord> = BTreeMap::new();
    for rec in evals.values() {
        if rec.spec.source == MapSource::None {
            baselines.insert(rec.spec.seed, rec);
        }
    }

    // Tables: group by (site, mask, seed); rows by source; cells by operator.
    type GroupKey = (String, String, u64);
    let mut grouped: BTreeMap<GroupKey, BTreeMap<String, BTreeMap<String, &EvalRecord>>> =
        BTreeMap::new();
    for rec in evals.values() {
        if rec.spec.source == MapSource::None {
            continue;
        }
        grouped
            .entry((
                rec.spec.site.name().to_string(),
                rec.spec.mask.name().to_string(),
                rec.spec.seed,
            ))
            .or_default()
            .entry(rec.spec.source.label())
            .or_default()
            .insert(rec.spec.op.name().to_string(), rec);
    }
    let mut groups = Vec::new();
    for ((site, mask, seed), rows) in &grouped {
        let base = baselines.get(seed).copied();
        if base.is_none() {
            notices.push(format!(
                "no baseline trained for seed {seed}; deltas omitted in site {site}, mask {mask}"
            ));
        }
        let mut report_rows = Vec::new();
        for (source, by_op) in rows {
            let cells = by_op
                .iter()
                .map(|(op, rec)| {
                    let bleu_delta = base.map(|b| rec.test_bleu - b.test_bleu);
                    let chrf_delta = base.map(|b| rec.test_chrf - b.test_chrf);
                    ReportCell {
                        op: op.clone(),
                        tag: rec.tag.clone(),
                        bleu: rec.test_bleu,
                        chrf: rec.test_chrf,
                        bleu_delta,
                        chrf_delta,
                        bleu_cell: score_cell(rec.test_bleu, bleu_delta),
                        chrf_cell: score_cell(rec.test_chrf, chrf_delta),
                    }
                })
                .collect();
            report_rows.push(ReportRow {
                source: source.clone(),
                cells,
            });
        }
        groups.push(ReportGroup {
            site: site.clone(),
            mask: mask.clone(),
            seed: *seed,
            baseline_bleu: base.map(|b| b.test_bleu),
            baseline_chrf: base.map(|b| b.test_chrf),
            rows: report_rows,
        });
    }

    // Correlations per (op, site, mask, seed) over methods that have both a
    // student evaluation and reconstruction statistics.
    type CorrKey = (String, String, String, u64);
    let mut corr_points: BTreeMap<CorrKey, Vec<(String, f64, MapStats)>> = BTreeMap::new();
    for rec in evals.values() {
        if let MapSource::File { origin, method } = &rec.spec.source {
            let key = (
                rec.spec.op.name().to_string(),
                rec.spec.site.name().to_string(),
                rec.spec.mask.name().to_string(),
                rec.spec.seed,
            );
            let stat = stats.get(&(origin.name().to_string(), method.name().to_string()));
            if let Some(s) = stat {
                corr_points
                    .entry(key)
                    .or_default()
                    .push((method.name().to_string(), rec.test_bleu, s.test));
            }
        }
    }
    let mut correlations = Vec::new();
    for ((op, site, mask, seed), mut points) in corr_points {
        points.sort_by(|a, b| a.0.cmp(&b.0));
        if points.len() < 3 {
            notices.push(format!(
                "correlations omitted for op {op}, site {site}, mask {mask}, seed {seed}: \
                 only {} method(s) with both student scores and reconstruction statistics (need >= 3)",
                points.len()
            ));
            continue;
        }
        let bleu: Vec<f64> = points.iter().map(|p| p.1).collect();
        let kl: Vec<f64> = points.iter().map(|p| p.2.mean_kl).collect();
        let overlap: Vec<f64> = points.iter().map(|p| p.2.overlap).collect();
        let tau: Vec<f64> = points.iter().map(|p| p.2.tau).collect();
        correlations.push(CorrelationReport {
            op,
            site,
            mask,
            seed,
            methods: points.iter().map(|p| p.0.clone()).collect(),
            pearson_bleu_mean_kl: pearson(&bleu, &kl)?,
            pearson_bleu_overlap: pearson(&bleu, &overlap)?,
            pearson_bleu_tau: pearson(&bleu, &tau)?,
            spearman_bleu_mean_kl: spearman(&bleu, &kl)?,
            spearman_bleu_overlap: spearman(&bleu, &overlap)?,
            spearman_bleu_tau: spearman(&bleu, &tau)?,
        });
    }
    if correlations.is_empty() && !corr_points_possible(&evals) {
        notices.push(
            "no correlation section: no student was trained from an attribution file".to_string(),
        );
    }

    // Concentration: mean column entropy of the normalised maps per file.
    let mut entropy = Vec::new();
    for (rel, path) in &attribution_files {
        if !path.exists() {
            notices.push(format!("attribution file {rel} named in the manifest is missing"));
            continue;
        }
        let records = read_attribution_file(path)?;
        if records.is_empty() {
            continue;
        }
        let mut total = 0.0;
        for rec in &records {
            let normalized = crate::injection::normalize_columns(&rec.matrix_tensor()?)?;
            total += column_entropy(&normalized)?;
        }
        let first = &records[0];
        entropy.push(EntropyReport {
            origin: first.target_origin.name().to_string(),
            method: first.method.name().to_string(),
            mean_column_entropy: total / records.len() as f64,
            pairs: records.len(),
        });
    }

    let report = Report {
        config_fingerprint: cfg.fingerprint()?,
        groups,
        correlations,
        entropy,
        notices,
    };
    write_text(&run.report_json(), &serde_json::to_string_pretty(&report)?)?;
    write_text(&run.report_text(), &render_report(&report))?;
    record_stage(
        run,
        cfg,
        "report",
        &[run.report_text(), run.report_json()],
        json!({
            "groups": report.groups.len(),
            "correlations": report.correlations.len(),
            "notices": report.notices.len(),
        }),
    )?;
    Ok(report)
}

fn corr_points_possible(evals: &BTreeMap<String, EvalRecord>) -> bool {
    evals
        .values()
        .any(|r| matches!(r.spec.source, MapSource::File { .. }))
}

fn render_report(report: &Report) -> String {
    let mut out = String::new();
    let push_line = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    push_line(&mut out, "Injection experiment report".to_string());
    push_line(&mut out, "===========================".to_string());
    push_line(&mut out, format!("config {}", report.config_fingerprint));
    for group in &report.groups {
        // Column set = union of operators present in any row, sorted.
        let mut ops: Vec<&str> = group
            .rows
            .iter()
            .flat_map(|r| r.cells.iter().map(|c| c.op.as_str()))
            .collect();
        ops.sort_unstable();
        ops.dedup();
        let src_width = group
            .rows
            .iter()
            .map(|r| r.source.len())
            .chain(std::iter::once("source".len()))
            .max()
            .unwrap_or(6);
        const CELL: usize = 14;
        for (metric, base) in [("BLEU", group.baseline_bleu), ("chrF", group.baseline_chrf)] {
            push_line(&mut out, String::new());
            let base_text = base
                .map(|b| format!("baseline {b:.2}"))
                .unwrap_or_else(|| "no baseline".to_string());
            push_line(
                &mut out,
                format!(
                    "{metric} — site {}, heads {}, seed {} ({base_text})",
                    group.site, group.mask, group.seed
                ),
            );
            let mut header = format!("{:<src_width$}", "source");
            for op in &ops {
                header.push_str(&format!(" | {op:<CELL$}"));
            }
            push_line(&mut out, header);
            for row in &group.rows {
                let mut line = format!("{:<src_width$}", row.source);
                for op in &ops {
                    let cell = row
                        .cells
                        .iter()
                        .find(|c| c.op == *op)
                        .map(|c| {
                            if metric == "BLEU" {
                                c.bleu_cell.clone()
                            } else {
                                c.chrf_cell.clone()
                            }
                        })
                        .unwrap_or_else(|| "-".to_string());
                    line.push_str(&format!(" | {cell:<CELL$}"));
                }
                push_line(&mut out, line);
            }
        }
    }
    if !report.correlations.is_empty() {
        push_line(&mut out, String::new());
        push_line(&mut out, "Student quality vs map reconstruction".to_string());
        push_line(&mut out, "-------------------------------------".to_string());
        for c in &report.correlations {
            push_line(
                &mut out,
                format!(
                    "op {}, site {}, heads {}, seed {} over {} methods ({})",
                    c.op,
                    c.site,
                    c.mask,
                    c.seed,
                    c.methods.len(),
                    c.methods.join(", ")
                ),
            );
            push_line(
                &mut out,
                format!(
                    "  pearson  BLEU vs mean KL {:+.3}, overlap@{REPORT_TOP_K} {:+.3}, tau@{REPORT_TOP_K} {:+.3}",
                    c.pearson_bleu_mean_kl, c.pearson_bleu_overlap, c.pearson_bleu_tau
                ),
            );
            push_line(
                &mut out,
                format!(
                    "  spearman BLEU vs mean KL {:+.3}, overlap@{REPORT_TOP_K} {:+.3}, tau@{REPORT_TOP_K} {:+.3}",
                    c.spearman_bleu_mean_kl, c.spearman_bleu_overlap, c.spearman_bleu_tau
                ),
            );
        }
    }
    if !report.entropy.is_empty() {
        push_line(&mut out, String::new());
        push_line(&mut out, "Map concentration (mean column entropy, nats)".to_string());
        push_line(&mut out, "---------------------------------------------".to_string());
        let width = report
            .entropy
            .iter()
            .map(|e| e.origin.len() + 1 + e.method.len())
            .max()
            .unwrap_or(10);
        for e in &report.entropy {
            let name = format!("{}.{}", e.origin, e.method);
            push_line(
                &mut out,
                format!("{name:<width$}  {:>7.4}  ({} pairs)", e.mean_column_entropy, e.pairs),
            );
        }
    }
    if !report.notices.is_empty() {
        push_line(&mut out, String::new());
        push_line(&mut out, "Notices".to_string());
        push_line(&mut out, "-------".to_string());
        for n in &report.notices {
            push_line(&mut out, format!("- {n}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Reorder;

    fn test_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "attrinject-pipeline-{}-{name}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_config() -> ExperimentConfig {
        let tiny_shape = ModelShape {
            d_model: 16,
            d_ff: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            max_len: 6,
        };
        ExperimentConfig {
            task: TaskSpec {
                vocab_words: 8,
                min_len: 2,
                max_len: 4,
                reorder: Reorder::Identity,
                pairs: 96,
                seed: 5,
            },
            valid_frac: 0.15,
            test_frac: 0.15,
            split_seed: 7,
            teacher: tiny_shape,
            student: tiny_shape,
            attributor: AttributorShape {
                d_model: 16,
                d_ff: 32,
                heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                gate_hidden: 8,
                max_len: 6,
            },
            teacher_train: TrainConfig {
                epochs: 30,
                batch_size: 16,
                patience: 0,
                adam: crate::train::AdamConfig {
                    lr: 3e-3,
                    ..crate::train::AdamConfig::default()
                },
                seed: 0,
            },
            student_train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                patience: 0,
                adam: crate::train::AdamConfig {
                    lr: 3e-3,
                    ..crate::train::AdamConfig::default()
                },
                seed: 0,
            },
            attributor_train: AttributorTrainConfig {
                epochs: 6,
                batch_size: 8,
                patience: 0,
                ..AttributorTrainConfig::default()
            },
            methods: vec![Method::Attention, Method::Saliency],
            operators: vec![ComposeOp::Multiply],
            sites: vec![Site::EncoderSelf],
            head_masks: vec![HeadMaskKind::All],
            target_origin: TargetOrigin::Gold,
            attribution: AttributionConfig::default(),
            seed: 3,
        }
    }

    fn sample_record(pair_id: usize) -> AttributionRecord {
        AttributionRecord {
            version: ATTRIBUTION_FILE_VERSION,
            pair_id,
            method: Method::Saliency,
            target_origin: TargetOrigin::Gold,
            source_tokens: vec!["s0".into(), "<eos>".into()],
            target_tokens: vec!["t0".into(), "t1".into(), "<eos>".into()],
            shape: [2, 3],
            matrix: vec![0.5, 0.1, 0.2, 0.3, 0.4, 0.9],
            normalized: false,
        }
    }

    #[test]
    fn attribution_records_round_trip_and_validate() {
        let dir = test_dir("records");
        let path = dir.join("maps.jsonl");
        let records = vec![sample_record(0), sample_record(4)];
        write_attribution_file(&path, &records).unwrap();
        let back = read_attribution_file(&path).unwrap();
        assert_eq!(back, records);

        let mut bad_version = sample_record(1);
        bad_version.version = 99;
        assert!(bad_version.validate().is_err());

        let mut bad_shape = sample_record(1);
        bad_shape.shape = [3, 3];
        assert!(bad_shape.validate().is_err());

        let mut bad_tokens = sample_record(1);
        bad_tokens.source_tokens.pop();
        assert!(bad_tokens.validate().is_err());

        let mut non_finite = sample_record(1);
        non_finite.matrix[2] = f64::NAN;
        assert!(non_finite.validate().is_err());

        // A corrupt line reports its position.
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let err = read_attribution_file(&path).unwrap_err().to_string();
        assert!(err.contains(":3"), "error should carry the line: {err}");

        // Duplicate pair ids are rejected.
        let dup = vec![sample_record(0), sample_record(0)];
        let dup_path = dir.join("dup.jsonl");
        fs::write(
            &dup_path,
            dup.iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect::<Vec<_>>()
                .join("\n"),
        )
        .unwrap();
        let err = read_attribution_file(&dup_path).unwrap_err().to_string();
        assert!(err.contains("duplicate pair id"), "{err}");
    }

    #[test]
    fn manifest_appends_in_order_and_requires_artifacts() {
        let dir = test_dir("manifest");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        run.create().unwrap();
        fs::write(dir.join("a.txt"), "a").unwrap();
        let entry = |stage: &str, artifacts: Vec<String>| ManifestEntry {
            stage: stage.to_string(),
            timestamp_secs: 1,
            config_fingerprint: cfg.fingerprint().unwrap(),
            artifacts,
            summary: json!({}),
        };
        append_manifest(&dir, &entry("one", vec!["a.txt".into()])).unwrap();
        append_manifest(&dir, &entry("two", vec![])).unwrap();
        let entries = read_manifest(&dir).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].stage, "one");
        assert_eq!(entries[1].stage, "two");

        let err = append_manifest(&dir, &entry("bad", vec!["missing.bin".into()]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing artifact"), "{err}");
        // The failed append must not have touched the log.
        assert_eq!(read_manifest(&dir).unwrap().len(), 2);
    }

    #[test]
    fn config_round_trips_and_fingerprint_tracks_content() {
        let dir = test_dir("config");
        let cfg = tiny_config();
        cfg.validate().unwrap();
        let path = dir.join("experiment.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        assert_eq!(cfg.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.fingerprint().unwrap(), cfg.fingerprint().unwrap());
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let ok = tiny_config();
        let mut c = ok.clone();
        c.valid_frac = 0.6;
        c.test_frac = 0.5;
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.methods.clear();
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.operators.push(ComposeOp::Multiply);
        assert!(c.validate().is_err(), "duplicate operators must be rejected");

        let mut c = ok.clone();
        c.student.max_len = ok.task.max_len; // no room for the end marker
        assert!(c.validate().is_err());

        let mut c = ok.clone();
        c.teacher.d_model = 15; // not divisible by heads
        assert!(c.validate().is_err());

        let mut c = ok;
        c.target_origin = TargetOrigin::TeacherGenerated;
        c.student.max_len = 5;
        c.teacher.max_len = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn student_tags_spell_out_the_grid_cell() {
        assert_eq!(StudentSpec::baseline(7).tag(), "baseline.seed7");
        let spec = StudentSpec {
            source: MapSource::File {
                origin: TargetOrigin::Gold,
                method: Method::IntegratedGradients,
            },
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::Alternating,
            seed: 3,
        };
        assert_eq!(
            spec.tag(),
            "gold.integrated_gradients.multiply.encoder_self.alternating.seed3"
        );
        let sanity = StudentSpec {
            source: MapSource::Random,
            op: ComposeOp::Add,
            site: Site::Cross,
            mask: HeadMaskKind::All,
            seed: 0,
        };
        assert_eq!(sanity.tag(), "random.add.cross.all.seed0");
    }

    #[test]
    fn control_and_oracle_squares_are_deterministic_and_well_shaped() {
        let dir = test_dir("squares");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        let corpus = generate_task(&cfg.task).unwrap();
        let l = cfg.student.max_len;
        let spec = |source: MapSource| StudentSpec {
            source,
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::All,
            seed: 9,
        };
        for source in [MapSource::Random, MapSource::Diagonal, MapSource::GoldAlignment] {
            let m1 = student_material(&cfg, &run, &corpus, &spec(source.clone())).unwrap();
            let m2 = student_material(&cfg, &run, &corpus, &spec(source.clone())).unwrap();
            let s1 = m1.squares.expect("squares expected");
            let s2 = m2.squares.unwrap();
            assert_eq!(s1.len(), corpus.examples.len());
            for (a, b) in s1.iter().zip(&s2) {
                assert_eq!(a.shape(), &[l, l]);
                assert_eq!(a.data(), b.data(), "{source:?} squares must be reproducible");
            }
            if source == MapSource::Random {
                assert_ne!(
                    s1[0].data(),
                    s1[1].data(),
                    "noise squares must differ between pairs"
                );
            }
        }
        let baseline = student_material(&cfg, &run, &corpus, &spec(MapSource::None)).unwrap();
        assert!(baseline.squares.is_none());
        assert_eq!(baseline.pairs.len(), corpus.examples.len());
    }

    #[test]
    fn extract_without_corpus_reports_what_to_run() {
        let dir = test_dir("no-corpus");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        run.create().unwrap();
        let err = stage_extract(&cfg, &run, |_| {}).unwrap_err().to_string();
        assert!(err.contains("corpus"), "{err}");
        assert!(err.contains("train-teacher"), "{err}");

        let report_err = stage_report(&cfg, &run).unwrap_err().to_string();
        assert!(report_err.contains("manifest"), "{report_err}");
    }

    #[test]
    fn report_fixture_perfect_rank_alignment_scores_spearman_one() {
        let dir = test_dir("report-fixture");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        run.create().unwrap();
        let methods = [
            (Method::Attention, 30.0, 0.9, 0.1),
            (Method::Saliency, 25.0, 0.7, 0.3),
            (Method::IntegratedGradients, 20.0, 0.5, 0.5),
        ];
        // Baseline eval.
        let base_spec = StudentSpec::baseline(3);
        let base = EvalRecord {
            tag: base_spec.tag(),
            spec: base_spec,
            test_bleu: 18.0,
            test_chrf: 40.0,
            test_ce: 1.0,
            test_accuracy: 0.5,
            epochs_run: 1,
            best_val_ce: 1.0,
        };
        write_text(
            &run.eval(&base.tag),
            &serde_json::to_string_pretty(&base).unwrap(),
        )
        .unwrap();
        record_stage(
            &run,
            &cfg,
            "train-student",
            &[run.eval(&base.tag)],
            json!({}),
        )
        .unwrap();
        for (method, bleu, overlap, kl) in methods {
            let spec = StudentSpec {
                source: MapSource::File {
                    origin: TargetOrigin::Gold,
                    method,
                },
                op: ComposeOp::Multiply,
                site: Site::EncoderSelf,
                mask: HeadMaskKind::All,
                seed: 3,
            };
            let rec = EvalRecord {
                tag: spec.tag(),
                spec,
                test_bleu: bleu,
                test_chrf: 40.0 + bleu,
                test_ce: 1.0,
                test_accuracy: 0.5,
                epochs_run: 1,
                best_val_ce: 1.0,
            };
            write_text(&run.eval(&rec.tag), &serde_json::to_string_pretty(&rec).unwrap()).unwrap();
            record_stage(&run, &cfg, "train-student", &[run.eval(&rec.tag)], json!({})).unwrap();
            let summary = AttributorSummary {
                origin: TargetOrigin::Gold,
                method,
                init_val_kl: 1.0,
                curves: AttributorCurves {
                    epochs_run: 1,
                    train_kl: vec![kl],
                    val_kl: vec![kl],
                    best_val_kl: kl,
                    stopped_early: false,
                },
                test: MapStats {
                    mean_kl: kl,
                    overlap,
                    tau: overlap,
                    pairs: 10,
                },
            };
            write_text(
                &run.attributor_stats(TargetOrigin::Gold, method),
                &serde_json::to_string_pretty(&summary).unwrap(),
            )
            .unwrap();
            // The stats artifact normally travels with a checkpoint; a stats
            // file alone is enough for the report.
            record_stage(
                &run,
                &cfg,
                "train-attributor",
                &[run.attributor_stats(TargetOrigin::Gold, method)],
                json!({}),
            )
            .unwrap();
        }
        let report = stage_report(&cfg, &run).unwrap();
        assert_eq!(report.correlations.len(), 1);
        let c = &report.correlations[0];
        assert_eq!(c.methods.len(), 3);
        assert!((c.spearman_bleu_overlap - 1.0).abs() < 1e-12);
        assert!((c.spearman_bleu_mean_kl + 1.0).abs() < 1e-12);
        assert!(c.pearson_bleu_overlap > 0.99);
        // Cell format: score then signed delta.
        let group = &report.groups[0];
        assert_eq!(group.baseline_bleu, Some(18.0));
        let attn_row = group
            .rows
            .iter()
            .find(|r| r.source == "gold.attention")
            .unwrap();
        assert_eq!(attn_row.cells[0].bleu_cell, "30.00_+12.00");
        let text = fs::read_to_string(run.report_text()).unwrap();
        assert!(text.contains("30.00_+12.00"), "{text}");
        assert!(run.report_json().exists());
    }

    #[test]
    fn report_with_two_methods_omits_correlations_with_notice() {
        let dir = test_dir("report-sparse");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        run.create().unwrap();
        for (method, bleu) in [(Method::Attention, 30.0), (Method::Saliency, 25.0)] {
            let spec = StudentSpec {
                source: MapSource::File {
                    origin: TargetOrigin::Gold,
                    method,
                },
                op: ComposeOp::Multiply,
                site: Site::EncoderSelf,
                mask: HeadMaskKind::All,
                seed: 3,
            };
            let rec = EvalRecord {
                tag: spec.tag(),
                spec,
                test_bleu: bleu,
                test_chrf: 50.0,
                test_ce: 1.0,
                test_accuracy: 0.5,
                epochs_run: 1,
                best_val_ce: 1.0,
            };
            write_text(&run.eval(&rec.tag), &serde_json::to_string_pretty(&rec).unwrap()).unwrap();
            record_stage(&run, &cfg, "train-student", &[run.eval(&rec.tag)], json!({})).unwrap();
            let summary = AttributorSummary {
                origin: TargetOrigin::Gold,
                method,
                init_val_kl: 1.0,
                curves: AttributorCurves {
                    epochs_run: 1,
                    train_kl: vec![0.5],
                    val_kl: vec![0.5],
                    best_val_kl: 0.5,
                    stopped_early: false,
                },
                test: MapStats {
                    mean_kl: 0.5,
                    overlap: 0.5,
                    tau: 0.5,
                    pairs: 10,
                },
            };
            write_text(
                &run.attributor_stats(TargetOrigin::Gold, method),
                &serde_json::to_string_pretty(&summary).unwrap(),
            )
            .unwrap();
            record_stage(
                &run,
                &cfg,
                "train-attributor",
                &[run.attributor_stats(TargetOrigin::Gold, method)],
                json!({}),
            )
            .unwrap();
        }
        let report = stage_report(&cfg, &run).unwrap();
        assert!(report.correlations.is_empty());
        assert!(
            report.notices.iter().any(|n| n.contains("need >= 3")),
            "notices: {:?}",
            report.notices
        );
    }

    // One slow walk through every stage on a miniature task.  Assertions are
    // structural (artifacts, determinism, coverage, wiring); statistical
    // strength is the acceptance suite's job.
    #[test]
    fn end_to_end_tiny_run_produces_consistent_artifacts() {
        let dir = test_dir("e2e");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);

        // Teacher.
        let teacher = stage_train_teacher(&cfg, &run, |_| {}).unwrap();
        assert!(run.teacher().exists());
        assert!(run.corpus().exists());
        assert!(
            teacher.val_accuracy > 0.5,
            "tiny identity teacher should learn something, got {}",
            teacher.val_accuracy
        );
        assert_eq!(
            teacher.warning.is_some(),
            teacher.val_accuracy < TEACHER_ACCURACY_WARN
        );

        // Extraction is deterministic byte-for-byte.
        let extract = stage_extract(&cfg, &run, |_| {}).unwrap();
        assert_eq!(extract.per_method.len(), 2);
        for per in &extract.per_method {
            assert_eq!(per.records + per.skipped, extract.pairs);
            assert_eq!(per.skipped, 0);
        }
        let path = run.attribution(TargetOrigin::Gold, Method::Attention);
        let first = fs::read(&path).unwrap();
        stage_extract(&cfg, &run, |_| {}).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            first,
            "re-extraction must reproduce the file exactly"
        );

        // Students: baseline, oracle alignment, and one extracted file.
        let baseline = stage_train_student(&cfg, &run, &StudentSpec::baseline(cfg.seed), |_| {})
            .unwrap();
        let gold_spec = StudentSpec {
            source: MapSource::GoldAlignment,
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::All,
            seed: cfg.seed,
        };
        let gold = stage_train_student(&cfg, &run, &gold_spec, |_| {}).unwrap();
        let file_spec = StudentSpec {
            source: MapSource::File {
                origin: TargetOrigin::Gold,
                method: Method::Attention,
            },
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::All,
            seed: cfg.seed,
        };
        let file_student = stage_train_student(&cfg, &run, &file_spec, |_| {}).unwrap();
        for rec in [&baseline, &gold, &file_student] {
            assert!(rec.test_bleu.is_finite() && rec.test_chrf.is_finite());
            assert!(rec.test_ce.is_finite() && rec.test_accuracy.is_finite());
            assert!(run.student(&rec.tag).exists());
            assert!(run.eval(&rec.tag).exists());
        }

        // Re-evaluation from persisted artifacts reproduces the metrics
        // bit-for-bit (stage isolation).
        let re_eval = stage_evaluate(&cfg, &run, &gold_spec).unwrap();
        assert_eq!(re_eval.test_bleu, gold.test_bleu);
        assert_eq!(re_eval.test_chrf, gold.test_chrf);
        assert_eq!(re_eval.test_ce, gold.test_ce);
        assert_eq!(re_eval.test_accuracy, gold.test_accuracy);

        // Attributor on the extracted attention maps.
        let attr = stage_train_attributor(&cfg, &run, TargetOrigin::Gold, Method::Attention, |_| {})
            .unwrap();
        assert!(attr.init_val_kl.is_finite() && attr.test.mean_kl.is_finite());
        assert!(run.attributor_model(TargetOrigin::Gold, Method::Attention).exists());
        assert!(run.attributor_stats(TargetOrigin::Gold, Method::Attention).exists());

        // Report ties it together; with one attributed method the
        // correlation section is a notice, and entropy covers both files.
        let report = stage_report(&cfg, &run).unwrap();
        assert!(report.correlations.is_empty());
        assert!(report.notices.iter().any(|n| n.contains("need >= 3")));
        assert_eq!(report.entropy.len(), 2);
        assert!(!report.groups.is_empty());
        assert!(run.report_text().exists() && run.report_json().exists());

        // The manifest saw every stage.
        let stages: Vec<String> = read_manifest(run.root())
            .unwrap()
            .into_iter()
            .map(|e| e.stage)
            .collect();
        for expected in [
            "train-teacher",
            "extract",
            "train-student",
            "evaluate",
            "train-attributor",
            "report",
        ] {
            assert!(
                stages.iter().any(|s| s == expected),
                "manifest is missing stage {expected}: {stages:?}"
            );
        }
    }

    #[test]
    fn student_training_demands_full_attribution_coverage() {
        let dir = test_dir("coverage");
        let cfg = tiny_config();
        let run = RunDir::new(&dir);
        stage_train_teacher(&cfg, &run, |_| {}).unwrap();
        stage_extract(&cfg, &run, |_| {}).unwrap();
        let path = run.attribution(TargetOrigin::Gold, Method::Saliency);
        let mut records = read_attribution_file(&path).unwrap();
        records.remove(10);
        write_attribution_file(&path, &records).unwrap();
        let spec = StudentSpec {
            source: MapSource::File {
                origin: TargetOrigin::Gold,
                method: Method::Saliency,
            },
            op: ComposeOp::Multiply,
            site: Site::EncoderSelf,
            mask: HeadMaskKind::All,
            seed: cfg.seed,
        };
        let err = stage_train_student(&cfg, &run, &spec, |_| {})
            .unwrap_err()
            .to_string();
        assert!(err.contains("pair 10"), "{err}");
        assert!(err.contains("cover"), "{err}");
    }

    #[test]
    fn teacher_generated_extraction_records_the_generated_targets() {
        let dir = test_dir("self-gen");
        let mut cfg = tiny_config();
        cfg.teacher_train.epochs = 4; // quality is irrelevant here
        cfg.methods = vec![Method::Attention];
        stage_train_teacher(&cfg, &RunDir::new(&dir), |_| {}).unwrap();
        cfg.target_origin = TargetOrigin::TeacherGenerated;
        let run = RunDir::new(&dir);
        stage_extract(&cfg, &run, |_| {}).unwrap();
        let records =
            read_attribution_file(&run.attribution(TargetOrigin::TeacherGenerated, Method::Attention))
                .unwrap();
        let corpus = load_corpus(&run).unwrap();
        let model = load_teacher(&run, &corpus).unwrap();
        assert_eq!(records.len(), corpus.examples.len());
        for rec in records.iter().take(5) {
            let src = corpus.encode_source(&corpus.examples[rec.pair_id]).unwrap();
            let mut generated = model
                .generate(&[src], None, model.config.max_len - 1)
                .unwrap()
                .remove(0);
            generated.push(EOS);
            assert_eq!(
                rec.target_tokens,
                corpus.tgt_vocab.decode(&generated),
                "record target must equal the teacher's own output"
            );
        }
    }
}
