//! The map-reconstruction network: an encoder–decoder transformer that
//! reads a source–target pair and predicts, for every target position, a
//! distribution over source positions — an estimate of the attribution
//! map a teacher produced for that pair.
//!
//! Architecture: source tokens + learned positions → self-attention
//! encoder; target tokens + learned positions → causal self-attention
//! decoder layers (no interleaved cross-attention); then one modified
//! cross-attention block that keeps the *score* vectors per head,
//! `s_{t,h} = q_{t,h} Kₕᵀ / √d_k + mask`, a small MLP gate
//! `p_t = softmax(W₂ GELU(W₁ h_t))` over heads, and the output rows
//! `â_t = softmax(Σ_h p_{t,h} s_{t,h})`.
//!
//! The training objective is the average row-wise KL divergence between
//! gold rows (source-normalised attribution maps, transposed to
//! target-major) and the predicted rows, over non-padded target positions.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::checkpoint::{assign_params, load_raw, save_raw, ParamWalk, RawCheckpoint};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::injection::normalize_columns;
use crate::metrics::{kendall_tau_at_k, mean_row_kl, overlap_at_k};
use crate::rng::Rng;
use crate::tape::{Tape, Var, MASK_NEG};
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};
use crate::transformer::{
    embed_init, ff_init, ln_init, pos_ids, xavier, AttnParams, EncLayerParams, FfParams,
    NormParams,
};

pub const CHECKPOINT_KIND: &str = "attributor";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributorConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Hidden width of the head-gate MLP.
    pub gate_hidden: usize,
    pub max_len: usize,
}

impl AttributorConfig {
    /// Desk-scale defaults: d = 64, 8 heads, 3 encoder and 3 decoder
    /// layers, gate hidden 64.
    pub fn desk(src_vocab: usize, tgt_vocab: usize, max_len: usize) -> Self {
        AttributorConfig {
            src_vocab,
            tgt_vocab,
            d_model: 64,
            d_ff: 128,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            gate_hidden: 64,
            max_len,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "model width {} must be a positive multiple of {} heads",
                self.d_model, self.heads
            )));
        }
        if self.enc_layers == 0
            || self.dec_layers == 0
            || self.d_ff == 0
            || self.gate_hidden == 0
            || self.max_len == 0
        {
            return Err(Error::InvalidInput(
                "all size fields must be positive".to_string(),
            ));
        }
        if self.src_vocab <= PAD || self.tgt_vocab <= PAD {
            return Err(Error::InvalidInput("vocabulary too small".to_string()));
        }
        Ok(())
    }
}

/// Parameter container generic over storage (tensors or tape handles).
/// Field order here is the canonical walk order and must match `names`.
#[derive(Debug, Clone)]
pub struct AttributorParams<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub src_pos: T,
    pub tgt_pos: T,
    pub enc: Vec<EncLayerParams<T>>,
    pub enc_ln: NormParams<T>,
    pub dec: Vec<EncLayerParams<T>>,
    pub dec_ln: NormParams<T>,
    pub cross_wq: T,
    pub cross_wk: T,
    pub gate: FfParams<T>,
}

impl<T> AttributorParams<T> {
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.src_embed);
        f(&self.tgt_embed);
        f(&self.src_pos);
        f(&self.tgt_pos);
        for l in &self.enc {
            l.for_each(f);
        }
        self.enc_ln.for_each(f);
        for l in &self.dec {
            l.for_each(f);
        }
        self.dec_ln.for_each(f);
        f(&self.cross_wq);
        f(&self.cross_wk);
        self.gate.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.src_embed);
        f(&mut self.tgt_embed);
        f(&mut self.src_pos);
        f(&mut self.tgt_pos);
        for l in &mut self.enc {
            l.for_each_mut(f);
        }
        self.enc_ln.for_each_mut(f);
        for l in &mut self.dec {
            l.for_each_mut(f);
        }
        self.dec_ln.for_each_mut(f);
        f(&mut self.cross_wq);
        f(&mut self.cross_wk);
        self.gate.for_each_mut(f);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttributorParams<U> {
        AttributorParams {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            src_pos: f(&self.src_pos),
            tgt_pos: f(&self.tgt_pos),
            enc: self.enc.iter().map(|l| l.map(f)).collect(),
            enc_ln: self.enc_ln.map(f),
            dec: self.dec.iter().map(|l| l.map(f)).collect(),
            dec_ln: self.dec_ln.map(f),
            cross_wq: f(&self.cross_wq),
            cross_wk: f(&self.cross_wk),
            gate: self.gate.map(f),
        }
    }

    /// Canonical tensor names in walk order.
    pub fn names(enc_layers: usize, dec_layers: usize) -> Vec<String> {
        let mut out = vec![
            "src_embed".to_string(),
            "tgt_embed".to_string(),
            "src_pos".to_string(),
            "tgt_pos".to_string(),
        ];
        for i in 0..enc_layers {
            EncLayerParams::<T>::push_names(&mut out, &format!("enc.{i}"));
        }
        NormParams::<T>::push_names(&mut out, "enc_ln");
        for i in 0..dec_layers {
            EncLayerParams::<T>::push_names(&mut out, &format!("dec.{i}"));
        }
        NormParams::<T>::push_names(&mut out, "dec_ln");
        out.push("cross.wq".to_string());
        out.push("cross.wk".to_string());
        FfParams::<T>::push_names(&mut out, "gate");
        out
    }
}

impl ParamWalk for AttributorParams<Tensor> {
    fn walk_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.for_each_mut(&mut |t| f(t));
    }
}

pub struct AttributorModel {
    pub config: AttributorConfig,
    pub params: AttributorParams<Tensor>,
}

/// Tape handles for one pair's graph.
pub struct PairGraph {
    /// Mixed pre-softmax row logits, `[lt, ls]`.
    pub logits: Var,
    /// Output rows `â_t` (softmaxed logits), `[lt, ls]`.
    pub rows: Var,
    /// Head-gate distributions, `[lt, heads]`.
    pub gate: Var,
    /// Per-head score vectors (post-mask), `[heads, lt, ls]`.
    pub scores: Var,
    /// Which target rows are real (non-padding).
    pub valid: Vec<bool>,
}

/// Value-level output of one pair.
pub struct AttributorOutput {
    /// `[lt, ls]`, rows are distributions over source positions.
    pub rows: Tensor,
    /// `[lt, heads]`, rows are distributions over heads.
    pub gate: Tensor,
    /// `[heads, lt, ls]` masked score vectors.
    pub scores: Tensor,
}

impl AttributorModel {
    pub fn init(config: AttributorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = Rng::new(seed);
        let enc = (0..config.enc_layers)
            .map(|i| {
                let mut r = rng.split(&format!("enc.{i}"));
                EncLayerParams {
                    ln1: ln_init(d),
                    attn: AttnParams::init(&mut r.split("attn"), d),
                    ln2: ln_init(d),
                    ff: ff_init(&mut r.split("ff"), d, config.d_ff),
                }
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|i| {
                let mut r = rng.split(&format!("dec.{i}"));
                EncLayerParams {
                    ln1: ln_init(d),
                    attn: AttnParams::init(&mut r.split("attn"), d),
                    ln2: ln_init(d),
                    ff: ff_init(&mut r.split("ff"), d, config.d_ff),
                }
            })
            .collect();
        let mut gate_rng = rng.split("gate");
        let params = AttributorParams {
            src_embed: embed_init(&mut rng.split("src_embed"), config.src_vocab, d),
            tgt_embed: embed_init(&mut rng.split("tgt_embed"), config.tgt_vocab, d),
            src_pos: embed_init(&mut rng.split("src_pos"), config.max_len, d),
            tgt_pos: embed_init(&mut rng.split("tgt_pos"), config.max_len, d),
            enc,
            enc_ln: ln_init(d),
            dec,
            dec_ln: ln_init(d),
            cross_wq: xavier(&mut rng.split("cross.wq"), d, d),
            cross_wk: xavier(&mut rng.split("cross.wk"), d, d),
            gate: FfParams {
                w1: xavier(&mut gate_rng.split("w1"), d, config.gate_hidden),
                b1: Tensor::zeros(vec![config.gate_hidden]),
                w2: xavier(&mut gate_rng.split("w2"), config.gate_hidden, config.heads),
                b2: Tensor::zeros(vec![config.heads]),
            },
        };
        Ok(AttributorModel { config, params })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> AttributorParams<Var> {
        self.params.map(&mut |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn check_ids(&self, src_ids: &[usize], tgt_ids: &[usize]) -> Result<(usize, usize)> {
        let (ls, lt) = (src_ids.len(), tgt_ids.len());
        if ls > self.config.max_len || lt > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {ls}/{lt} exceeds maximum {}",
                self.config.max_len
            )));
        }
        let real_src = real_len(src_ids)?;
        let real_tgt = real_len(tgt_ids)?;
        if let Some(&id) = src_ids.iter().find(|&&id| id >= self.config.src_vocab) {
            return Err(Error::InvalidInput(format!(
                "source id {id} outside vocab {}",
                self.config.src_vocab
            )));
        }
        if let Some(&id) = tgt_ids.iter().find(|&&id| id >= self.config.tgt_vocab) {
            return Err(Error::InvalidInput(format!(
                "target id {id} outside vocab {}",
                self.config.tgt_vocab
            )));
        }
        Ok((real_src, real_tgt))
    }

    /// Build the full graph of one (possibly pad-extended) pair on `tape`
    /// against an existing parameter binding.
    pub fn graph(
        &self,
        tape: &Tape,
        p: &AttributorParams<Var>,
        src_ids: &[usize],
        tgt_ids: &[usize],
    ) -> Result<PairGraph> {
        let (real_src, real_tgt) = self.check_ids(src_ids, tgt_ids)?;
        let cfg = &self.config;
        let (ls, lt, h, d_k) = (src_ids.len(), tgt_ids.len(), cfg.heads, cfg.d_k());

        // Encoder over the source.
        let x = tape.embed(p.src_embed, src_ids)?;
        let pos = tape.embed(p.src_pos, &pos_ids(1, ls))?;
        let mut x = tape.add(x, pos)?;
        let enc_mask = key_pad_mask(h, ls, ls, real_src);
        for layer in &p.enc {
            x = self.layer(tape, layer, x, enc_mask.clone())?;
        }
        let memory = tape.layer_norm(x, p.enc_ln.gain, p.enc_ln.bias)?;

        // Causal decoder over the raw target tokens.
        let y = tape.embed(p.tgt_embed, tgt_ids)?;
        let pos = tape.embed(p.tgt_pos, &pos_ids(1, lt))?;
        let mut y = tape.add(y, pos)?;
        let causal = causal_mask(h, lt);
        for layer in &p.dec {
            y = self.layer(tape, layer, y, causal.clone())?;
        }
        let states = tape.layer_norm(y, p.dec_ln.gain, p.dec_ln.bias)?;

        // Modified cross-attention: keep the per-head score vectors.
        let q = tape.matmul(states, p.cross_wq)?;
        let qh = tape.split_heads(q, 1, h)?;
        let k = tape.matmul(memory, p.cross_wk)?;
        let kh = tape.split_heads(k, 1, h)?;
        let s = tape.bmm_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (d_k as f64).sqrt());
        let mask = tape.constant(key_pad_mask(h, lt, ls, real_src));
        let scores = tape.add(s, mask)?;

        // Head gate from the contextualised target states.
        let g = tape.matmul(states, p.gate.w1)?;
        let g = tape.add_row(g, p.gate.b1)?;
        let g = tape.gelu(g);
        let g = tape.matmul(g, p.gate.w2)?;
        let g = tape.add_row(g, p.gate.b2)?;
        let gate = tape.softmax(g, None)?;

        // Convex combination over heads, then row softmax.
        let logits = tape.head_mix(scores, gate)?;
        let rows = tape.softmax(logits, None)?;

        let valid: Vec<bool> = (0..lt).map(|t| t < real_tgt).collect();
        Ok(PairGraph {
            logits,
            rows,
            gate,
            scores,
            valid,
        })
    }

    /// One pre-norm transformer layer: masked self-attention + feed-forward.
    fn layer(
        &self,
        tape: &Tape,
        p: &EncLayerParams<Var>,
        x: Var,
        mask: Tensor,
    ) -> Result<Var> {
        let h = self.config.heads;
        let normed = tape.layer_norm(x, p.ln1.gain, p.ln1.bias)?;
        let q = tape.matmul(normed, p.attn.wq)?;
        let k = tape.matmul(normed, p.attn.wk)?;
        let v = tape.matmul(normed, p.attn.wv)?;
        let qh = tape.split_heads(q, 1, h)?;
        let kh = tape.split_heads(k, 1, h)?;
        let vh = tape.split_heads(v, 1, h)?;
        let s = tape.bmm_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (self.config.d_k() as f64).sqrt());
        let w = tape.softmax(s, Some(mask))?;
        let o = tape.bmm(w, vh)?;
        let merged = tape.merge_heads(o, 1, h)?;
        let attn_out = tape.matmul(merged, p.attn.wo)?;
        let x = tape.add(x, attn_out)?;
        let normed = tape.layer_norm(x, p.ln2.gain, p.ln2.bias)?;
        let hidden = tape.matmul(normed, p.ff.w1)?;
        let hidden = tape.add_row(hidden, p.ff.b1)?;
        let hidden = tape.swish(hidden);
        let ff = tape.matmul(hidden, p.ff.w2)?;
        let ff = tape.add_row(ff, p.ff.b2)?;
        tape.add(x, ff)
    }

    /// Value-level forward of one pair.
    pub fn forward(&self, src_ids: &[usize], tgt_ids: &[usize]) -> Result<AttributorOutput> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let g = self.graph(&tape, &p, src_ids, tgt_ids)?;
        Ok(AttributorOutput {
            rows: tape.value(g.rows),
            gate: tape.value(g.gate),
            scores: tape.value(g.scores),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names = AttributorParams::<Tensor>::names(self.config.enc_layers, self.config.dec_layers);
        let mut tensors = Vec::with_capacity(names.len());
        let mut i = 0;
        self.params.for_each(&mut |t| {
            tensors.push((names[i].clone(), t.clone()));
            i += 1;
        });
        let raw = RawCheckpoint {
            kind: CHECKPOINT_KIND.to_string(),
            config_json: serde_json::to_string(&self.config)?,
            tensors,
        };
        save_raw(path, &raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = load_raw(path)?;
        if raw.kind != CHECKPOINT_KIND {
            return Err(Error::IncompatibleCheckpoint(format!(
                "kind {:?}, expected {CHECKPOINT_KIND:?}",
                raw.kind
            )));
        }
        let config: AttributorConfig = serde_json::from_str(&raw.config_json)?;
        let mut model = AttributorModel::init(config, 0)?;
        let names =
            AttributorParams::<Tensor>::names(model.config.enc_layers, model.config.dec_layers);
        assign_params(&raw, &names, &mut model.params)?;
        Ok(model)
    }
}

/// Average row-wise KL divergence `KL(gold_row ‖ softmax(logits_row))`
/// over the valid rows.  Errors when no row is valid.
pub fn map_kl_loss(tape: &Tape, logits: Var, gold: Tensor, valid: &[bool]) -> Result<Var> {
    tape.kl_rows(logits, gold, valid)
}

/// Real (pre-padding) length of an id sequence: ids up to the first
/// padding id, which may only be followed by more padding.
fn real_len(ids: &[usize]) -> Result<usize> {
    let n = ids.iter().position(|&id| id == PAD).unwrap_or(ids.len());
    if n == 0 {
        return Err(Error::InvalidInput("empty sequence".to_string()));
    }
    if ids[n..].iter().any(|&id| id != PAD) {
        return Err(Error::InvalidInput(
            "padding may only trail a sequence".to_string(),
        ));
    }
    Ok(n)
}

/// Additive mask `[h, q, k]` switching off key columns ≥ `real_k`.
fn key_pad_mask(h: usize, q: usize, k: usize, real_k: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![h, q, k]);
    for g in 0..h {
        for r in 0..q {
            for c in real_k..k {
                m.data_mut()[(g * q + r) * k + c] = MASK_NEG;
            }
        }
    }
    m
}

/// Additive causal mask `[h, l, l]`: position `t` sees keys ≤ `t`.
fn causal_mask(h: usize, l: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![h, l, l]);
    for g in 0..h {
        for r in 0..l {
            for c in r + 1..l {
                m.data_mut()[(g * l + r) * l + c] = MASK_NEG;
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Gold-map preparation
// ---------------------------------------------------------------------------

/// Turn a raw attribution map `[ls, lt]` (source × target) into gold
/// training rows `[lt, ls]`: min-max normalise each target column, rescale
/// it to sum 1 (a constant column becomes uniform), then transpose so each
/// target position owns a distribution over source positions.
pub fn gold_rows(map: &Tensor) -> Result<Tensor> {
    let normed = normalize_columns(map)?;
    let (ls, lt) = (normed.rows(), normed.cols());
    let mut out = normed;
    for k in 0..lt {
        let sum: f64 = (0..ls).map(|j| out.get2(j, k)).sum();
        if sum > 0.0 {
            for j in 0..ls {
                let v = out.get2(j, k) / sum;
                out.set2(j, k, v);
            }
        } else {
            for j in 0..ls {
                out.set2(j, k, 1.0 / ls as f64);
            }
        }
    }
    Ok(out.transpose2())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training example: source ids, target ids (both ending in the
/// end-of-sequence id, unpadded), and the raw attribution map `[ls, lt]`.
#[derive(Debug, Clone)]
pub struct MapExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Raw (unnormalised) attribution map, source × target.
    pub map: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for AttributorTrainConfig {
    fn default() -> Self {
        AttributorTrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributorCurves {
    pub epochs_run: usize,
    pub train_kl: Vec<f64>,
    pub val_kl: Vec<f64>,
    pub best_val_kl: f64,
    pub stopped_early: bool,
}

fn prepared(set: &[MapExample]) -> Result<Vec<(Vec<usize>, Vec<usize>, Tensor)>> {
    set.iter()
        .map(|ex| {
            if ex.map.shape() != [ex.src.len(), ex.tgt.len()] {
                return Err(Error::InvalidInput(format!(
                    "map shape {:?} does not match pair lengths {}×{}",
                    ex.map.shape(),
                    ex.src.len(),
                    ex.tgt.len()
                )));
            }
            Ok((ex.src.clone(), ex.tgt.clone(), gold_rows(&ex.map)?))
        })
        .collect()
}

/// Mean validation KL of `model` over a prepared set (weighted by target
/// length, matching the training objective).
fn mean_kl_prepared(
    model: &AttributorModel,
    set: &[(Vec<usize>, Vec<usize>, Tensor)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for (src, tgt, gold) in set {
        let out = model.forward(src, tgt)?;
        total += mean_row_kl(gold, &out.rows)? * tgt.len() as f64;
        rows += tgt.len();
    }
    if rows == 0 {
        return Err(Error::InvalidInput("empty evaluation set".to_string()));
    }
    Ok(total / rows as f64)
}

/// Train the map-reconstruction network.  Returns per-epoch curves; the
/// model is left at the best validation checkpoint.  A zero-epoch budget
/// leaves the model untouched.
pub fn train_attributor(
    model: &mut AttributorModel,
    train: &[MapExample],
    valid: &[MapExample],
    cfg: &AttributorTrainConfig,
    mut log: impl FnMut(&str),
) -> Result<AttributorCurves> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidInput(
            "need non-empty training and validation sets".to_string(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".to_string()));
    }
    let train_set = prepared(train)?;
    let valid_set = prepared(valid)?;
    let mut curves = AttributorCurves {
        epochs_run: 0,
        train_kl: Vec::new(),
        val_kl: Vec::new(),
        best_val_kl: f64::INFINITY,
        stopped_early: false,
    };
    let mut adam = Adam::new(cfg.adam.clone());
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut since_best = 0usize;
    let mut order_rng = Rng::new(cfg.seed).split("example-order");

    for epoch in 0..cfg.epochs {
        // Deterministic reshuffle of example order each epoch.
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut r = order_rng.split(&format!("epoch{epoch}"));
        for i in (1..order.len()).rev() {
            let j = (r.uniform() * (i + 1) as f64) as usize;
            order.swap(i, j.min(i));
        }

        let mut epoch_total = 0.0;
        let mut epoch_rows = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let bound = model.bind(&tape, true);
            let n_rows: usize = chunk.iter().map(|&i| train_set[i].1.len()).sum();
            let mut loss: Option<Var> = None;
            for &i in chunk {
                let (src, tgt, gold) = &train_set[i];
                let g = model.graph(&tape, &bound, src, tgt)?;
                let kl = map_kl_loss(&tape, g.logits, gold.clone(), &g.valid)?;
                let weighted = tape.scale(kl, tgt.len() as f64 / n_rows as f64);
                loss = Some(match loss {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted)?,
                });
            }
            let loss = loss.expect("non-empty chunk");
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Pipeline(format!(
                    "map-reconstruction training diverged at epoch {epoch}, batch {bi}: loss {loss_val}"
                )));
            }
            epoch_total += loss_val * n_rows as f64;
            epoch_rows += n_rows;
            tape.backward(loss, &Tensor::scalar(1.0))?;
            let mut grads = Vec::new();
            bound.for_each(&mut |&v| {
                grads.push(tape.grad(v));
            });
            let mut shapes = Vec::new();
            model.params.for_each(&mut |t| shapes.push(t.shape().to_vec()));
            let grads: Vec<Tensor> = grads
                .into_iter()
                .zip(shapes)
                .map(|(g, shape)| g.unwrap_or_else(|| Tensor::zeros(shape)))
                .collect();
            adam.update(
                |f| model.params.for_each_mut(&mut |t| f(t)),
                &grads,
            )?;
        }

        let train_kl = epoch_total / epoch_rows as f64;
        let val_kl = mean_kl_prepared(model, &valid_set)?;
        curves.train_kl.push(train_kl);
        curves.val_kl.push(val_kl);
        curves.epochs_run = epoch + 1;
        log(&format!(
            "epoch {epoch}: train KL {train_kl:.6}, val KL {val_kl:.6}"
        ));

        if val_kl < curves.best_val_kl {
            curves.best_val_kl = val_kl;
            let mut snap = Vec::new();
            model.params.for_each(&mut |t| snap.push(t.clone()));
            best_params = Some(snap);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                curves.stopped_early = true;
                break;
            }
        }
    }

    if let Some(snap) = best_params {
        let mut it = snap.into_iter();
        model.params.for_each_mut(&mut |t| {
            *t = it.next().expect("snapshot aligned with params");
        });
    }
    Ok(curves)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Reconstruction quality of predictions against gold, aggregated over a
/// held-out set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapStats {
    /// Mean row-wise KL of gold against predicted rows.
    pub mean_kl: f64,
    /// Mean per-target overlap of top-k source sets.
    pub overlap: f64,
    /// Mean per-target rank correlation on the gold top-k positions.
    pub tau: f64,
    pub pairs: usize,
}

/// Compare one pair's gold rows and predicted rows (`[lt, ls]` each):
/// row-wise KL plus top-k overlap and rank correlation per target row.
pub fn reconstruction_stats(gold: &Tensor, pred: &Tensor, k: usize) -> Result<(f64, f64, f64)> {
    let kl = mean_row_kl(gold, pred)?;
    // The overlap/rank helpers compare per *column*; transpose to
    // source-major so columns are target positions.
    let gold_map = gold.transpose2();
    let pred_map = pred.transpose2();
    let overlap = overlap_at_k(&pred_map, &gold_map, k)?;
    let tau = kendall_tau_at_k(&pred_map, &gold_map, k)?;
    Ok((kl, overlap, tau))
}

/// Evaluate a trained model on a held-out set with top-`k` statistics.
pub fn evaluate_attributor(
    model: &AttributorModel,
    set: &[MapExample],
    k: usize,
) -> Result<MapStats> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".to_string()));
    }
    let prepared_set = prepared(set)?;
    let mut kl_total = 0.0;
    let mut ov_total = 0.0;
    let mut tau_total = 0.0;
    let mut rows = 0usize;
    for (src, tgt, gold) in &prepared_set {
        let out = model.forward(src, tgt)?;
        let (kl, ov, tau) = reconstruction_stats(gold, &out.rows, k)?;
        let w = tgt.len() as f64;
        kl_total += kl * w;
        ov_total += ov * w;
        tau_total += tau * w;
        rows += tgt.len();
    }
    Ok(MapStats {
        mean_kl: kl_total / rows as f64,
        overlap: ov_total / rows as f64,
        tau: tau_total / rows as f64,
        pairs: set.len(),
    })
}
