//! Encoder–decoder transformer with inspectable, hookable attention.
//!
//! The model is deliberately small and plain: pre-norm blocks, bias-free
//! attention projections, swish feed-forwards, learned positional rows,
//! separate source/target embeddings.  What distinguishes it from an
//! off-the-shelf transformer is that the attention internals are first-class:
//! every layer's pre-softmax scores, post-softmax weights and per-head value
//! vectors can be traced out, and an external map can be composed into the
//! scores of a chosen site (encoder self-attention or cross-attention) on a
//! chosen subset of heads — the operation the rest of the crate studies.
//!
//! All matrices are grouped `[batch·heads, len, d_k]` for the batched matmul
//! kernels; `[batch·len, d_model]` elsewhere.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tape::{softmax_row, ComposeOp, Tape, Var, MASK_NEG};
use crate::tensor::Tensor;

/// Which attention site an injected map is composed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Encoder self-attention, every encoder layer.
    EncoderSelf,
    /// Decoder→encoder cross-attention, every decoder layer.
    Cross,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder_self",
            Site::Cross => "cross",
        }
    }

    pub fn from_name(s: &str) -> crate::error::Result<Site> {
        match s {
            "encoder_self" => Ok(Site::EncoderSelf),
            "cross" => Ok(Site::Cross),
            other => Err(crate::error::Error::InvalidInput(format!(
                "unknown injection site '{other}' (expected encoder_self or cross)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Hard cap on source and target sequence length (tokens incl. specials).
    pub max_len: usize,
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.src_vocab <= UNK_GUARD || self.tgt_vocab <= UNK_GUARD {
            return Err(Error::InvalidInput(
                "vocab must cover the four specials".into(),
            ));
        }
        if self.max_len == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::InvalidInput("degenerate model shape".into()));
        }
        Ok(())
    }
}

const UNK_GUARD: usize = 3;

// ---------------------------------------------------------------------------
// Parameters, generic over storage so the same structure holds tensors
// (the model), tape vars (a bound forward pass) or optimiser slots.
// NOTE: `for_each`, `for_each_mut`, `map` and `push_names` must all walk
// fields in the same order; the checkpoint format depends on it.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone)]
pub struct FfParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct EncLayerParams<T> {
    pub ln1: NormParams<T>,
    pub attn: AttnParams<T>,
    pub ln2: NormParams<T>,
    pub ff: FfParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecLayerParams<T> {
    pub ln1: NormParams<T>,
    pub self_attn: AttnParams<T>,
    pub ln2: NormParams<T>,
    pub cross_attn: AttnParams<T>,
    pub ln3: NormParams<T>,
    pub ff: FfParams<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub src_pos: T,
    pub tgt_pos: T,
    pub enc: Vec<EncLayerParams<T>>,
    pub enc_ln: NormParams<T>,
    pub dec: Vec<DecLayerParams<T>>,
    pub dec_ln: NormParams<T>,
    pub out_w: T,
    pub out_b: T,
}

macro_rules! substruct_walk {
    ($name:ident, $($field:ident),+) => {
        impl<T> $name<T> {
            pub(crate) fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
                $(f(&self.$field);)+
            }
            pub(crate) fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
                $(f(&mut self.$field);)+
            }
            pub(crate) fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field)),+ }
            }
            pub(crate) fn push_names(out: &mut Vec<String>, prefix: &str) {
                $(out.push(format!("{prefix}.{}", stringify!($field)));)+
            }
        }
    };
}

substruct_walk!(AttnParams, wq, wk, wv, wo);
substruct_walk!(FfParams, w1, b1, w2, b2);
substruct_walk!(NormParams, gain, bias);

impl<T> EncLayerParams<T> {
    pub(crate) fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.ln1.for_each(f);
        self.attn.for_each(f);
        self.ln2.for_each(f);
        self.ff.for_each(f);
    }
    pub(crate) fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.ln1.for_each_mut(f);
        self.attn.for_each_mut(f);
        self.ln2.for_each_mut(f);
        self.ff.for_each_mut(f);
    }
    pub(crate) fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncLayerParams<U> {
        EncLayerParams {
            ln1: self.ln1.map(f),
            attn: self.attn.map(f),
            ln2: self.ln2.map(f),
            ff: self.ff.map(f),
        }
    }
    pub(crate) fn push_names(out: &mut Vec<String>, prefix: &str) {
        NormParams::<T>::push_names(out, &format!("{prefix}.ln1"));
        AttnParams::<T>::push_names(out, &format!("{prefix}.attn"));
        NormParams::<T>::push_names(out, &format!("{prefix}.ln2"));
        FfParams::<T>::push_names(out, &format!("{prefix}.ff"));
    }
}

impl<T> DecLayerParams<T> {
    fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        self.ln1.for_each(f);
        self.self_attn.for_each(f);
        self.ln2.for_each(f);
        self.cross_attn.for_each(f);
        self.ln3.for_each(f);
        self.ff.for_each(f);
    }
    fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.ln1.for_each_mut(f);
        self.self_attn.for_each_mut(f);
        self.ln2.for_each_mut(f);
        self.cross_attn.for_each_mut(f);
        self.ln3.for_each_mut(f);
        self.ff.for_each_mut(f);
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecLayerParams<U> {
        DecLayerParams {
            ln1: self.ln1.map(f),
            self_attn: self.self_attn.map(f),
            ln2: self.ln2.map(f),
            cross_attn: self.cross_attn.map(f),
            ln3: self.ln3.map(f),
            ff: self.ff.map(f),
        }
    }
    fn push_names(out: &mut Vec<String>, prefix: &str) {
        NormParams::<T>::push_names(out, &format!("{prefix}.ln1"));
        AttnParams::<T>::push_names(out, &format!("{prefix}.self_attn"));
        NormParams::<T>::push_names(out, &format!("{prefix}.ln2"));
        AttnParams::<T>::push_names(out, &format!("{prefix}.cross_attn"));
        NormParams::<T>::push_names(out, &format!("{prefix}.ln3"));
        FfParams::<T>::push_names(out, &format!("{prefix}.ff"));
    }
}

impl<T> ModelParams<T> {
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.src_embed);
        f(&self.tgt_embed);
        f(&self.src_pos);
        f(&self.tgt_pos);
        for layer in &self.enc {
            layer.for_each(f);
        }
        self.enc_ln.for_each(f);
        for layer in &self.dec {
            layer.for_each(f);
        }
        self.dec_ln.for_each(f);
        f(&self.out_w);
        f(&self.out_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.src_embed);
        f(&mut self.tgt_embed);
        f(&mut self.src_pos);
        f(&mut self.tgt_pos);
        for layer in &mut self.enc {
            layer.for_each_mut(f);
        }
        self.enc_ln.for_each_mut(f);
        for layer in &mut self.dec {
            layer.for_each_mut(f);
        }
        self.dec_ln.for_each_mut(f);
        f(&mut self.out_w);
        f(&mut self.out_b);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            src_pos: f(&self.src_pos),
            tgt_pos: f(&self.tgt_pos),
            enc: self.enc.iter().map(|l| l.map(f)).collect(),
            enc_ln: self.enc_ln.map(f),
            dec: self.dec.iter().map(|l| l.map(f)).collect(),
            dec_ln: self.dec_ln.map(f),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }

    /// Canonical parameter names, in `for_each` order.
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
            DecLayerParams::<T>::push_names(&mut out, &format!("dec.{i}"));
        }
        NormParams::<T>::push_names(&mut out, "dec_ln");
        out.push("out_w".to_string());
        out.push("out_b".to_string());
        out
    }
}

impl ModelParams<Tensor> {
    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_| n += 1);
        n
    }
}

// ---------------------------------------------------------------------------
// Initialisation
// ---------------------------------------------------------------------------

pub(crate) fn xavier(rng: &mut crate::rng::Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| rng.uniform_in(-limit, limit))
}

pub(crate) fn embed_init(rng: &mut crate::rng::Rng, rows: usize, d: usize) -> Tensor {
    Tensor::from_fn(vec![rows, d], |_| rng.normal() * 0.02)
}

impl AttnParams<Tensor> {
    pub(crate) fn init(rng: &mut crate::rng::Rng, d: usize) -> Self {
        AttnParams {
            wq: xavier(&mut rng.split("wq"), d, d),
            wk: xavier(&mut rng.split("wk"), d, d),
            wv: xavier(&mut rng.split("wv"), d, d),
            wo: xavier(&mut rng.split("wo"), d, d),
        }
    }
}

pub(crate) fn ff_init(rng: &mut crate::rng::Rng, d: usize, d_ff: usize) -> FfParams<Tensor> {
    FfParams {
        w1: xavier(&mut rng.split("w1"), d, d_ff),
        b1: Tensor::zeros(vec![d_ff]),
        w2: xavier(&mut rng.split("w2"), d_ff, d),
        b2: Tensor::zeros(vec![d]),
    }
}

pub(crate) fn ln_init(d: usize) -> NormParams<Tensor> {
    NormParams {
        gain: Tensor::full(vec![d], 1.0),
        bias: Tensor::zeros(vec![d]),
    }
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A batch padded to its own max lengths.  `src` rows are `words + EOS`;
/// decoder input rows are `BOS + words` and decoder targets `words + EOS`,
/// so input and target rows share one length.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub b: usize,
    pub ls: usize,
    pub lt: usize,
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    /// Real source lengths (incl. EOS) per example.
    pub src_len: Vec<usize>,
    /// Real target lengths (incl. EOS) per example.
    pub tgt_len: Vec<usize>,
}

impl PaddedBatch {
    /// Build from `(source ids incl. EOS, target ids incl. EOS)` pairs.
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for (s, t) in pairs {
            if s.is_empty() || t.is_empty() {
                return Err(Error::InvalidInput("empty sequence in batch".into()));
            }
            if s.iter().all(|&id| id == PAD) {
                return Err(Error::InvalidInput("all-padding source sequence".into()));
            }
        }
        let b = pairs.len();
        let ls = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
        let lt = pairs.iter().map(|(_, t)| t.len()).max().unwrap();
        let mut src = vec![PAD; b * ls];
        let mut tgt_in = vec![PAD; b * lt];
        let mut tgt_out = vec![PAD; b * lt];
        let mut src_len = Vec::with_capacity(b);
        let mut tgt_len = Vec::with_capacity(b);
        for (bi, (s, t)) in pairs.iter().enumerate() {
            src[bi * ls..bi * ls + s.len()].copy_from_slice(s);
            src_len.push(s.len());
            tgt_in[bi * lt] = BOS;
            tgt_in[bi * lt + 1..bi * lt + t.len()].copy_from_slice(&t[..t.len() - 1]);
            tgt_out[bi * lt..bi * lt + t.len()].copy_from_slice(t);
            tgt_len.push(t.len());
        }
        Ok(PaddedBatch {
            b,
            ls,
            lt,
            src,
            tgt_in,
            tgt_out,
            src_len,
            tgt_len,
        })
    }

    pub fn valid_targets(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&id| id != PAD).collect()
    }

    fn enc_mask(&self, heads: usize) -> Tensor {
        let (b, l) = (self.b, self.ls);
        let mut m = Tensor::zeros(vec![b * heads, l, l]);
        for bi in 0..b {
            let real = self.src_len[bi];
            for h in 0..heads {
                let g = bi * heads + h;
                for q in 0..l {
                    for k in real..l {
                        m.data_mut()[(g * l + q) * l + k] = MASK_NEG;
                    }
                }
            }
        }
        m
    }

    fn dec_self_mask(&self, heads: usize) -> Tensor {
        let (b, l) = (self.b, self.lt);
        let mut m = Tensor::zeros(vec![b * heads, l, l]);
        for bi in 0..b {
            let real = self.tgt_len[bi];
            for h in 0..heads {
                let g = bi * heads + h;
                for q in 0..l {
                    for k in 0..l {
                        if k > q || k >= real {
                            m.data_mut()[(g * l + q) * l + k] = MASK_NEG;
                        }
                    }
                }
            }
        }
        m
    }

    fn cross_mask(&self, heads: usize) -> Tensor {
        let (b, lt, ls) = (self.b, self.lt, self.ls);
        let mut m = Tensor::zeros(vec![b * heads, lt, ls]);
        for bi in 0..b {
            let real = self.src_len[bi];
            for h in 0..heads {
                let g = bi * heads + h;
                for q in 0..lt {
                    for k in real..ls {
                        m.data_mut()[(g * lt + q) * ls + k] = MASK_NEG;
                    }
                }
            }
        }
        m
    }
}

pub(crate) fn pos_ids(b: usize, l: usize) -> Vec<usize> {
    (0..b).flat_map(|_| 0..l).collect()
}

// ---------------------------------------------------------------------------
// Injection binding
// ---------------------------------------------------------------------------

/// An injection request for one forward pass: per-example maps already cut
/// to the batch's score shape for `site` (`[b, q, k]`).
#[derive(Debug, Clone)]
pub struct InjectionSpec {
    pub site: Site,
    pub compose: ComposeOp,
    /// One flag per head; `true` heads receive the map.
    pub head_mask: Vec<bool>,
    pub maps: Tensor,
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Attention internals of one layer, one example: `[heads, q, k]` scores
/// (exactly what softmax consumed, minus the additive mask) and weights,
/// plus the per-head value vectors `[heads, k, d_k]`.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub scores: Tensor,
    pub weights: Tensor,
    pub values: Tensor,
}

/// Single-example teacher-forced trace of every attention site, plus the
/// per-decoder-layer states and cross keys needed to replay a decoder layer
/// in isolation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub enc_self: Vec<AttnRecord>,
    pub dec_self: Vec<AttnRecord>,
    pub cross: Vec<AttnRecord>,
    /// Decoder stream entering each decoder layer, `[lt, d_model]`.
    pub dec_inputs: Vec<Tensor>,
    /// Decoder stream leaving each decoder layer, `[lt, d_model]`.
    pub dec_outputs: Vec<Tensor>,
    /// Cross-attention keys per layer, `[heads, ls, d_k]`.
    pub cross_k: Vec<Tensor>,
}

struct AttnVarRecord {
    scores: Var,
    weights: Var,
    values: Var,
}

#[derive(Default)]
struct TraceVars {
    enc_self: Vec<AttnVarRecord>,
    dec_self: Vec<AttnVarRecord>,
    cross: Vec<AttnVarRecord>,
    dec_inputs: Vec<Var>,
    dec_outputs: Vec<Var>,
    cross_k: Vec<Var>,
}

pub struct ForwardOpts<'a> {
    /// Bind parameters as differentiable leaves (training) or constants.
    pub trainable: bool,
    pub injection: Option<&'a InjectionSpec>,
    /// Capture attention internals (single-example batches only).
    pub want_trace: bool,
    /// Use this `[b·ls, d_model]` leaf as the source token embeddings
    /// instead of the table lookup — the hook input-attribution needs.
    pub src_emb_override: Option<Tensor>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            trainable: false,
            injection: None,
            want_trace: false,
            src_emb_override: None,
        }
    }
}

/// Handles into a completed forward pass.
pub struct Forward {
    /// `[b·lt, tgt_vocab]`
    pub logits: Var,
    /// Encoder output the decoder attends to, `[b·ls, d_model]`.
    pub memory: Var,
    /// Source token embeddings before positions, `[b·ls, d_model]`.
    pub src_token_emb: Var,
    /// The parameters as bound on this tape, for reading gradients after a
    /// backward sweep.
    pub bound: ModelParams<Var>,
    trace_vars: Option<TraceVars>,
}

pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Seq2SeqModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::Rng::new(seed);
        let d = config.d_model;
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
                DecLayerParams {
                    ln1: ln_init(d),
                    self_attn: AttnParams::init(&mut r.split("self_attn"), d),
                    ln2: ln_init(d),
                    cross_attn: AttnParams::init(&mut r.split("cross_attn"), d),
                    ln3: ln_init(d),
                    ff: ff_init(&mut r.split("ff"), d, config.d_ff),
                }
            })
            .collect();
        let params = ModelParams {
            src_embed: embed_init(&mut rng.split("src_embed"), config.src_vocab, d),
            tgt_embed: embed_init(&mut rng.split("tgt_embed"), config.tgt_vocab, d),
            src_pos: embed_init(&mut rng.split("src_pos"), config.max_len, d),
            tgt_pos: embed_init(&mut rng.split("tgt_pos"), config.max_len, d),
            enc,
            enc_ln: ln_init(d),
            dec,
            dec_ln: ln_init(d),
            out_w: xavier(&mut rng.split("out_w"), d, config.tgt_vocab),
            out_b: Tensor::zeros(vec![config.tgt_vocab]),
        };
        Ok(Seq2SeqModel { config, params })
    }

    fn bind(&self, tape: &Tape, trainable: bool) -> ModelParams<Var> {
        self.params.map(&mut |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn check_batch(&self, batch: &PaddedBatch) -> Result<()> {
        if batch.ls > self.config.max_len || batch.lt > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {}/{} exceeds model maximum {}",
                batch.ls, batch.lt, self.config.max_len
            )));
        }
        if let Some(&id) = batch.src.iter().find(|&&id| id >= self.config.src_vocab) {
            return Err(Error::InvalidInput(format!(
                "source id {id} outside vocab {}",
                self.config.src_vocab
            )));
        }
        if let Some(&id) = batch
            .tgt_in
            .iter()
            .chain(batch.tgt_out.iter())
            .find(|&&id| id >= self.config.tgt_vocab)
        {
            return Err(Error::InvalidInput(format!(
                "target id {id} outside vocab {}",
                self.config.tgt_vocab
            )));
        }
        Ok(())
    }

    /// Full teacher-forced forward pass over a padded batch.
    pub fn forward(&self, tape: &Tape, batch: &PaddedBatch, opts: &ForwardOpts) -> Result<Forward> {
        self.check_batch(batch)?;
        if opts.want_trace && batch.b != 1 {
            return Err(Error::InvalidInput(
                "attention tracing requires a single-example batch".into(),
            ));
        }
        if let Some(spec) = opts.injection {
            let want = match spec.site {
                Site::EncoderSelf => [batch.b, batch.ls, batch.ls],
                Site::Cross => [batch.b, batch.lt, batch.ls],
            };
            if spec.maps.shape() != want {
                return Err(Error::shape(
                    "injection",
                    format!("maps {:?} vs site shape {:?}", spec.maps.shape(), want),
                ));
            }
            if spec.head_mask.len() != self.config.heads {
                return Err(Error::shape(
                    "injection",
                    format!(
                        "head mask {} vs heads {}",
                        spec.head_mask.len(),
                        self.config.heads
                    ),
                ));
            }
        }
        let p = self.bind(tape, opts.trainable);
        let mut trace = opts.want_trace.then(TraceVars::default);

        let (memory, src_token_emb) = self.encode_graph(tape, &p, batch, opts, trace.as_mut())?;
        let logits = self.decode_graph(tape, &p, batch, memory, opts, trace.as_mut())?;
        Ok(Forward {
            logits,
            memory,
            src_token_emb,
            bound: p,
            trace_vars: trace,
        })
    }

    fn encode_graph(
        &self,
        tape: &Tape,
        p: &ModelParams<Var>,
        batch: &PaddedBatch,
        opts: &ForwardOpts,
        mut trace: Option<&mut TraceVars>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (b, ls, h) = (batch.b, batch.ls, cfg.heads);
        let token_emb = match &opts.src_emb_override {
            Some(t) => {
                if t.shape() != [b * ls, cfg.d_model] {
                    return Err(Error::shape(
                        "src_emb_override",
                        format!("{:?} vs [{}, {}]", t.shape(), b * ls, cfg.d_model),
                    ));
                }
                tape.leaf(t.clone())
            }
            None => tape.embed(p.src_embed, &batch.src)?,
        };
        let pos = tape.embed(p.src_pos, &pos_ids(b, ls))?;
        let mut x = tape.add(token_emb, pos)?;
        let mask = batch.enc_mask(h);
        let inject = opts
            .injection
            .filter(|s| s.site == Site::EncoderSelf)
            .map(|s| (&s.maps, s.compose, s.head_mask.as_slice()));
        for layer in &p.enc {
            let normed = tape.layer_norm(x, layer.ln1.gain, layer.ln1.bias)?;
            let (attn_out, rec) =
                self.attn_graph(tape, &layer.attn, normed, normed, b, mask.clone(), inject)?;
            x = tape.add(x, attn_out)?;
            if let Some(t) = trace.as_deref_mut() {
                t.enc_self.push(rec);
            }
            let normed = tape.layer_norm(x, layer.ln2.gain, layer.ln2.bias)?;
            let ff = self.ff_graph(tape, &layer.ff, normed)?;
            x = tape.add(x, ff)?;
        }
        let memory = tape.layer_norm(x, p.enc_ln.gain, p.enc_ln.bias)?;
        Ok((memory, token_emb))
    }

    fn decode_graph(
        &self,
        tape: &Tape,
        p: &ModelParams<Var>,
        batch: &PaddedBatch,
        memory: Var,
        opts: &ForwardOpts,
        mut trace: Option<&mut TraceVars>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, lt, h) = (batch.b, batch.lt, cfg.heads);
        let token_emb = tape.embed(p.tgt_embed, &batch.tgt_in)?;
        let pos = tape.embed(p.tgt_pos, &pos_ids(b, lt))?;
        let mut x = tape.add(token_emb, pos)?;
        let self_mask = batch.dec_self_mask(h);
        let cross_mask = batch.cross_mask(h);
        let inject = opts
            .injection
            .filter(|s| s.site == Site::Cross)
            .map(|s| (&s.maps, s.compose, s.head_mask.as_slice()));
        for layer in &p.dec {
            if let Some(t) = trace.as_deref_mut() {
                t.dec_inputs.push(x);
            }
            // Masked self-attention.
            let normed = tape.layer_norm(x, layer.ln1.gain, layer.ln1.bias)?;
            let (attn_out, rec) = self.attn_graph(
                tape,
                &layer.self_attn,
                normed,
                normed,
                b,
                self_mask.clone(),
                None,
            )?;
            x = tape.add(x, attn_out)?;
            if let Some(t) = trace.as_deref_mut() {
                t.dec_self.push(rec);
            }
            // Cross-attention against the encoder memory.
            let normed = tape.layer_norm(x, layer.ln2.gain, layer.ln2.bias)?;
            let kh = {
                let k = tape.matmul(memory, layer.cross_attn.wk)?;
                tape.split_heads(k, b, h)?
            };
            let vh = {
                let v = tape.matmul(memory, layer.cross_attn.wv)?;
                tape.split_heads(v, b, h)?
            };
            let (attn_out, rec) = self.cross_attn_graph(
                tape,
                &layer.cross_attn,
                normed,
                kh,
                vh,
                b,
                cross_mask.clone(),
                inject,
            )?;
            x = tape.add(x, attn_out)?;
            if let Some(t) = trace.as_deref_mut() {
                t.cross.push(rec);
                t.cross_k.push(kh);
            }
            // Feed-forward.
            let normed = tape.layer_norm(x, layer.ln3.gain, layer.ln3.bias)?;
            let ff = self.ff_graph(tape, &layer.ff, normed)?;
            x = tape.add(x, ff)?;
            if let Some(t) = trace.as_deref_mut() {
                t.dec_outputs.push(x);
            }
        }
        let x = tape.layer_norm(x, p.dec_ln.gain, p.dec_ln.bias)?;
        let logits = tape.matmul(x, p.out_w)?;
        tape.add_row(logits, p.out_b)
    }

    /// Self-attention block: queries and keys/values both from `x_kv == x_q`.
    #[allow(clippy::too_many_arguments)]
    fn attn_graph(
        &self,
        tape: &Tape,
        p: &AttnParams<Var>,
        x_q: Var,
        x_kv: Var,
        b: usize,
        mask: Tensor,
        inject: Option<(&Tensor, ComposeOp, &[bool])>,
    ) -> Result<(Var, AttnVarRecord)> {
        let h = self.config.heads;
        let q = tape.matmul(x_q, p.wq)?;
        let k = tape.matmul(x_kv, p.wk)?;
        let v = tape.matmul(x_kv, p.wv)?;
        let qh = tape.split_heads(q, b, h)?;
        let kh = tape.split_heads(k, b, h)?;
        let vh = tape.split_heads(v, b, h)?;
        self.attn_core(tape, p, qh, kh, vh, b, mask, inject)
    }

    /// Cross-attention block with externally supplied per-head keys/values.
    #[allow(clippy::too_many_arguments)]
    fn cross_attn_graph(
        &self,
        tape: &Tape,
        p: &AttnParams<Var>,
        x_q: Var,
        kh: Var,
        vh: Var,
        b: usize,
        mask: Tensor,
        inject: Option<(&Tensor, ComposeOp, &[bool])>,
    ) -> Result<(Var, AttnVarRecord)> {
        let h = self.config.heads;
        let q = tape.matmul(x_q, p.wq)?;
        let qh = tape.split_heads(q, b, h)?;
        self.attn_core(tape, p, qh, kh, vh, b, mask, inject)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_core(
        &self,
        tape: &Tape,
        p: &AttnParams<Var>,
        qh: Var,
        kh: Var,
        vh: Var,
        b: usize,
        mask: Tensor,
        inject: Option<(&Tensor, ComposeOp, &[bool])>,
    ) -> Result<(Var, AttnVarRecord)> {
        let h = self.config.heads;
        let scale = 1.0 / (self.config.d_k() as f64).sqrt();
        let s = tape.bmm_nt(qh, kh)?;
        let mut s = tape.scale(s, scale);
        if let Some((maps, compose, head_mask)) = inject {
            s = tape.inject(s, maps.clone(), compose, head_mask)?;
        }
        let w = tape.softmax(s, Some(mask))?;
        let o = tape.bmm(w, vh)?;
        let merged = tape.merge_heads(o, b, h)?;
        let out = tape.matmul(merged, p.wo)?;
        Ok((
            out,
            AttnVarRecord {
                scores: s,
                weights: w,
                values: vh,
            },
        ))
    }

    fn ff_graph(&self, tape: &Tape, p: &FfParams<Var>, x: Var) -> Result<Var> {
        let hidden = tape.matmul(x, p.w1)?;
        let hidden = tape.add_row(hidden, p.b1)?;
        let hidden = tape.swish(hidden);
        let out = tape.matmul(hidden, p.w2)?;
        tape.add_row(out, p.b2)
    }

    /// Teacher-forced loss over a batch: mean cross-entropy on non-padding
    /// target positions.
    pub fn loss(
        &self,
        tape: &Tape,
        batch: &PaddedBatch,
        opts: &ForwardOpts,
    ) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, batch, opts)?;
        let valid = batch.valid_targets();
        let loss = tape.cross_entropy(fwd.logits, &batch.tgt_out, &valid)?;
        Ok((loss, fwd))
    }

    /// Teacher-forced attention trace of one example (no padding involved).
    pub fn trace(
        &self,
        src_ids: &[usize],
        tgt_ids: &[usize],
        injection: Option<&InjectionSpec>,
    ) -> Result<Trace> {
        let batch = PaddedBatch::new(&[(src_ids.to_vec(), tgt_ids.to_vec())])?;
        let tape = Tape::new();
        let opts = ForwardOpts {
            trainable: false,
            injection,
            want_trace: true,
            src_emb_override: None,
        };
        let fwd = self.forward(&tape, &batch, &opts)?;
        let vars = fwd.trace_vars.expect("trace requested");
        let take = |rs: &[AttnVarRecord]| {
            rs.iter()
                .map(|r| AttnRecord {
                    scores: tape.value(r.scores),
                    weights: tape.value(r.weights),
                    values: tape.value(r.values),
                })
                .collect::<Vec<_>>()
        };
        Ok(Trace {
            enc_self: take(&vars.enc_self),
            dec_self: take(&vars.dec_self),
            cross: take(&vars.cross),
            dec_inputs: vars.dec_inputs.iter().map(|&v| tape.value(v)).collect(),
            dec_outputs: vars.dec_outputs.iter().map(|&v| tape.value(v)).collect(),
            cross_k: vars.cross_k.iter().map(|&v| tape.value(v)).collect(),
        })
    }

    /// Re-run one decoder layer from a traced input state, optionally with
    /// the cross-attention value vectors of one source position zeroed in
    /// every head.  Returns the layer's output states `[lt, d_model]`.
    ///
    /// The perturbation is layer-local: downstream layers are not re-run
    /// with the perturbed states; each layer is probed from its own clean
    /// input.
    pub fn decoder_layer_replay(
        &self,
        layer: usize,
        x_in: &Tensor,
        cross_k: &Tensor,
        cross_v: &Tensor,
        zero_source: Option<usize>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (h, dk) = (cfg.heads, cfg.d_k());
        if layer >= cfg.dec_layers {
            return Err(Error::InvalidInput(format!(
                "decoder layer {layer} out of range"
            )));
        }
        let lt = x_in.shape()[0];
        let ls = cross_k.shape()[1];
        let tape = Tape::new();
        let p = self.params.dec[layer].map(&mut |t: &Tensor| tape.constant(t.clone()));
        let mut vh_t = cross_v.clone();
        if let Some(j) = zero_source {
            if j >= ls {
                return Err(Error::InvalidInput(format!(
                    "source position {j} out of range {ls}"
                )));
            }
            for hi in 0..h {
                let off = (hi * ls + j) * dk;
                vh_t.data_mut()[off..off + dk].fill(0.0);
            }
        }
        let x = tape.constant(x_in.clone());
        let kh = tape.constant(cross_k.clone());
        let vh = tape.constant(vh_t);

        // Causal self-attention (single example, no padding).
        let mut causal = Tensor::zeros(vec![h, lt, lt]);
        for g in 0..h {
            for q in 0..lt {
                for k in q + 1..lt {
                    causal.data_mut()[(g * lt + q) * lt + k] = MASK_NEG;
                }
            }
        }
        let normed = tape.layer_norm(x, p.ln1.gain, p.ln1.bias)?;
        let (attn_out, _) =
            self.attn_graph(&tape, &p.self_attn, normed, normed, 1, causal, None)?;
        let x1 = tape.add(x, attn_out)?;

        let normed = tape.layer_norm(x1, p.ln2.gain, p.ln2.bias)?;
        let cross_mask = Tensor::zeros(vec![h, lt, ls]);
        let (attn_out, _) =
            self.cross_attn_graph(&tape, &p.cross_attn, normed, kh, vh, 1, cross_mask, None)?;
        let x2 = tape.add(x1, attn_out)?;

        let normed = tape.layer_norm(x2, p.ln3.gain, p.ln3.bias)?;
        let ff = self.ff_graph(&tape, &p.ff, normed)?;
        let out = tape.add(x2, ff)?;
        Ok(tape.value(out))
    }

    /// Greedy batched generation.  `squares`, when given, holds one
    /// `[max_len, max_len]` oriented injection square per example; the right
    /// block is sliced out for whatever lengths each step needs.
    pub fn generate(
        &self,
        srcs: &[Vec<usize>],
        injection: Option<&GenerationInjection>,
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let cfg = &self.config;
        if srcs.is_empty() {
            return Err(Error::InvalidInput("no sources to generate from".into()));
        }
        if let Some(gi) = injection {
            if gi.squares.len() != srcs.len() {
                return Err(Error::InvalidInput(format!(
                    "{} injection squares for {} sources",
                    gi.squares.len(),
                    srcs.len()
                )));
            }
            for sq in &gi.squares {
                if sq.shape() != [cfg.max_len, cfg.max_len] {
                    return Err(Error::shape(
                        "generation injection",
                        format!(
                            "square {:?} vs [{}, {}]",
                            sq.shape(),
                            cfg.max_len,
                            cfg.max_len
                        ),
                    ));
                }
            }
        }
        let b = srcs.len();
        let max_steps = max_steps.min(cfg.max_len - 1);
        // Fake single-token targets to reuse the batch plumbing for encoding.
        let pairs: Vec<(Vec<usize>, Vec<usize>)> =
            srcs.iter().map(|s| (s.clone(), vec![EOS])).collect();
        let enc_batch = PaddedBatch::new(&pairs)?;
        self.check_batch(&enc_batch)?;
        let ls = enc_batch.ls;

        // Encode once; decoder steps run on fresh tapes against the memory.
        let enc_inject = injection
            .filter(|gi| gi.site == Site::EncoderSelf)
            .map(|gi| InjectionSpec {
                site: Site::EncoderSelf,
                compose: gi.compose,
                head_mask: gi.head_mask.clone(),
                maps: stack_blocks(&gi.squares, ls, ls),
            });
        let memory = {
            let tape = Tape::new();
            let p = self.bind(&tape, false);
            let opts = ForwardOpts {
                trainable: false,
                injection: enc_inject.as_ref(),
                want_trace: false,
                src_emb_override: None,
            };
            let (mem, _) = self.encode_graph(&tape, &p, &enc_batch, &opts, None)?;
            tape.value(mem)
        };

        let mut out_ids: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut finished = vec![false; b];
        for step in 0..max_steps {
            let lt = step + 1;
            let mut batch = enc_batch.clone();
            batch.lt = lt;
            batch.tgt_in = Vec::with_capacity(b * lt);
            for bi in 0..b {
                batch.tgt_in.push(BOS);
                for t in 0..step {
                    batch
                        .tgt_in
                        .push(out_ids[bi].get(t).copied().unwrap_or(PAD));
                }
            }
            batch.tgt_out = vec![PAD; b * lt]; // unused
            batch.tgt_len = (0..b)
                .map(|bi| (out_ids[bi].len() + 1).min(lt))
                .collect();

            let cross_inject = injection
                .filter(|gi| gi.site == Site::Cross)
                .map(|gi| InjectionSpec {
                    site: Site::Cross,
                    compose: gi.compose,
                    head_mask: gi.head_mask.clone(),
                    maps: stack_blocks(&gi.squares, lt, ls),
                });
            let tape = Tape::new();
            let p = self.bind(&tape, false);
            let mem = tape.constant(memory.clone());
            let opts = ForwardOpts {
                trainable: false,
                injection: cross_inject.as_ref(),
                want_trace: false,
                src_emb_override: None,
            };
            let logits = self.decode_graph(&tape, &p, &batch, mem, &opts, None)?;
            let logits = tape.value(logits);
            let v = cfg.tgt_vocab;
            let mut all_done = true;
            for bi in 0..b {
                if finished[bi] {
                    continue;
                }
                let row = &logits.data()[((bi + 1) * lt - 1) * v..((bi + 1) * lt) * v];
                let next = argmax(row);
                if next == EOS {
                    finished[bi] = true;
                } else {
                    out_ids[bi].push(next);
                    all_done = false;
                }
            }
            if all_done && finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(out_ids)
    }

    /// Beam-search generation for a single source.  `width = 1` coincides
    /// with greedy decoding.  Scores are summed token log-probabilities;
    /// ties break toward the earlier beam, then the smaller token id.
    pub fn generate_beam(
        &self,
        src_ids: &[usize],
        width: usize,
        injection: Option<&GenerationInjection>,
    ) -> Result<Vec<usize>> {
        let cfg = &self.config;
        if width == 0 {
            return Err(Error::InvalidInput("beam width must be positive".into()));
        }
        let max_steps = cfg.max_len - 1;
        let pairs = vec![(src_ids.to_vec(), vec![EOS])];
        let enc_batch = PaddedBatch::new(&pairs)?;
        self.check_batch(&enc_batch)?;
        let ls = enc_batch.ls;
        let enc_inject = injection
            .filter(|gi| gi.site == Site::EncoderSelf)
            .map(|gi| InjectionSpec {
                site: Site::EncoderSelf,
                compose: gi.compose,
                head_mask: gi.head_mask.clone(),
                maps: stack_blocks(&gi.squares, ls, ls),
            });
        let memory = {
            let tape = Tape::new();
            let p = self.bind(&tape, false);
            let opts = ForwardOpts {
                injection: enc_inject.as_ref(),
                ..Default::default()
            };
            let (mem, _) = self.encode_graph(&tape, &p, &enc_batch, &opts, None)?;
            tape.value(mem)
        };

        #[derive(Clone)]
        struct Beam {
            ids: Vec<usize>,
            score: f64,
            finished: bool,
        }
        let mut beams = vec![Beam {
            ids: Vec::new(),
            score: 0.0,
            finished: false,
        }];
        for step in 0..max_steps {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            let lt = step + 1;
            let mut candidates: Vec<Beam> = Vec::new();
            for beam in &beams {
                if beam.finished {
                    candidates.push(beam.clone());
                    continue;
                }
                let mut batch = enc_batch.clone();
                batch.lt = lt;
                batch.tgt_in = std::iter::once(BOS)
                    .chain(beam.ids.iter().copied())
                    .collect();
                batch.tgt_out = vec![PAD; lt];
                batch.tgt_len = vec![lt];
                let cross_inject = injection
                    .filter(|gi| gi.site == Site::Cross)
                    .map(|gi| InjectionSpec {
                        site: Site::Cross,
                        compose: gi.compose,
                        head_mask: gi.head_mask.clone(),
                        maps: stack_blocks(&gi.squares, lt, ls),
                    });
                let tape = Tape::new();
                let p = self.bind(&tape, false);
                let mem = tape.constant(memory.clone());
                let opts = ForwardOpts {
                    injection: cross_inject.as_ref(),
                    ..Default::default()
                };
                let logits = self.decode_graph(&tape, &p, &batch, mem, &opts, None)?;
                let logits = tape.value(logits);
                let v = cfg.tgt_vocab;
                let mut row = logits.data()[(lt - 1) * v..lt * v].to_vec();
                softmax_row(&mut row);
                // Expand by the `width` most probable tokens.
                let mut order: Vec<usize> = (0..v).collect();
                order.sort_by(|&a, &bi| {
                    row[bi]
                        .partial_cmp(&row[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&bi))
                });
                for &tok in order.iter().take(width) {
                    let mut ids = beam.ids.clone();
                    let mut finished = false;
                    if tok == EOS {
                        finished = true;
                    } else {
                        ids.push(tok);
                    }
                    candidates.push(Beam {
                        ids,
                        score: beam.score + row[tok].max(1e-300).ln(),
                        finished,
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            candidates.truncate(width);
            beams = candidates;
        }
        beams.sort_by(|a, b| {
            b.finished
                .cmp(&a.finished)
                .then(b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal))
        });
        Ok(beams.remove(0).ids)
    }
}

/// Injection request for generation: one oriented `[max_len, max_len]`
/// square per example, sliced per step.
#[derive(Debug, Clone)]
pub struct GenerationInjection {
    pub site: Site,
    pub compose: ComposeOp,
    pub head_mask: Vec<bool>,
    pub squares: Vec<Tensor>,
}

/// Cut `[rows, cols]` from the top-left of each square and stack to
/// `[b, rows, cols]`.
pub fn stack_blocks(squares: &[Tensor], rows: usize, cols: usize) -> Tensor {
    let b = squares.len();
    let mut out = Tensor::zeros(vec![b, rows, cols]);
    let l = squares[0].shape()[1];
    for (bi, sq) in squares.iter().enumerate() {
        for r in 0..rows {
            let src = &sq.data()[r * l..r * l + cols];
            out.data_mut()[(bi * rows + r) * cols..(bi * rows + r + 1) * cols]
                .copy_from_slice(src);
        }
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            src_vocab: 12,
            tgt_vocab: 12,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            max_len: 8,
        }
    }

    fn tiny_model(seed: u64) -> Seq2SeqModel {
        Seq2SeqModel::init(tiny_config(), seed).unwrap()
    }

    fn batch_of(pairs: &[(&[usize], &[usize])]) -> PaddedBatch {
        let owned: Vec<(Vec<usize>, Vec<usize>)> = pairs
            .iter()
            .map(|(s, t)| (s.to_vec(), t.to_vec()))
            .collect();
        PaddedBatch::new(&owned).unwrap()
    }

    #[test]
    fn param_names_match_walk_order_count_and_are_unique() {
        let m = tiny_model(1);
        let names = ModelParams::<Tensor>::names(1, 2);
        assert_eq!(names.len(), m.params.count());
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_model(7);
        let b = tiny_model(7);
        let mut pairs = Vec::new();
        a.params.for_each(&mut |t| pairs.push(t.clone()));
        let mut i = 0;
        b.params.for_each(&mut |t| {
            assert_eq!(t.data(), pairs[i].data());
            i += 1;
        });
        let c = tiny_model(8);
        let mut differs = false;
        let mut j = 0;
        c.params.for_each(&mut |t| {
            if t.data() != pairs[j].data() {
                differs = true;
            }
            j += 1;
        });
        assert!(differs);
    }

    #[test]
    fn forward_logit_rows_softmax_to_probabilities() {
        let m = tiny_model(2);
        let batch = batch_of(&[(&[4, 5, EOS], &[6, 7, EOS]), (&[6, EOS], &[4, EOS])]);
        let tape = Tape::new();
        let fwd = m.forward(&tape, &batch, &ForwardOpts::default()).unwrap();
        let logits = tape.value(fwd.logits);
        for r in 0..logits.rows() {
            let mut row = logits.row(r).to_vec();
            softmax_row(&mut row);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny_model(3);
        let base = batch_of(&[(&[4, 5, 6, EOS], &[7, 8, 9, EOS])]);
        let tape = Tape::new();
        let f1 = m.forward(&tape, &base, &ForwardOpts::default()).unwrap();
        let l1 = tape.value(f1.logits);
        // Perturb the target at position 2 (input position 3 is EOS row).
        let mut changed = base.clone();
        changed.tgt_in[2] = 10;
        let tape2 = Tape::new();
        let f2 = m.forward(&tape2, &changed, &ForwardOpts::default()).unwrap();
        let l2 = tape2.value(f2.logits);
        // Rows before the perturbed position must be identical.
        for r in 0..2 {
            for c in 0..l1.cols() {
                assert!(
                    (l1.get2(r, c) - l2.get2(r, c)).abs() <= 1e-12,
                    "future token leaked into row {r}"
                );
            }
        }
        // And the perturbed row itself must differ (sanity that the probe bit).
        let moved: f64 = (0..l1.cols())
            .map(|c| (l1.get2(2, c) - l2.get2(2, c)).abs())
            .sum();
        assert!(moved > 1e-9);
    }

    #[test]
    fn padding_does_not_leak_into_real_positions() {
        let m = tiny_model(4);
        // Same example alone vs. padded next to a longer one.
        let alone = batch_of(&[(&[4, 5, EOS], &[6, EOS])]);
        let padded = batch_of(&[(&[4, 5, EOS], &[6, EOS]), (&[7, 8, 9, 10, EOS], &[4, 5, 6, EOS])]);
        let t1 = Tape::new();
        let f1 = m.forward(&t1, &alone, &ForwardOpts::default()).unwrap();
        let l1 = t1.value(f1.logits);
        let t2 = Tape::new();
        let f2 = m.forward(&t2, &padded, &ForwardOpts::default()).unwrap();
        let l2 = t2.value(f2.logits);
        // First example's real rows (first 2 target positions) must match.
        let v = l1.cols();
        for r in 0..2 {
            for c in 0..v {
                let a = l1.get2(r, c);
                let b = l2.data()[(r) * v + c]; // example 0 occupies rows 0..lt
                assert!(
                    (a - b).abs() < 1e-9,
                    "padding changed logits at ({r},{c}): {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn trace_matches_forward_and_weights_are_stochastic() {
        let m = tiny_model(5);
        let src = [4, 5, 6, EOS];
        let tgt = [7, 8, EOS];
        let trace = m.trace(&src, &tgt, None).unwrap();
        assert_eq!(trace.enc_self.len(), 1);
        assert_eq!(trace.dec_self.len(), 2);
        assert_eq!(trace.cross.len(), 2);
        let h = m.config.heads;
        for rec in trace
            .enc_self
            .iter()
            .chain(trace.dec_self.iter())
            .chain(trace.cross.iter())
        {
            let shape = rec.weights.shape().to_vec();
            assert_eq!(shape[0], h);
            // Every weight row is a distribution.
            let (q, k) = (shape[1], shape[2]);
            for g in 0..h {
                for r in 0..q {
                    let s: f64 = (0..k)
                        .map(|c| rec.weights.data()[(g * q + r) * k + c])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-10, "row {r} sums to {s}");
                }
            }
            // weights == softmax(scores + mask) is exercised implicitly: for
            // cross-attention no positions are masked, so recompute directly.
        }
        // Cross-attention: recompute softmax of traced scores and compare.
        for rec in &trace.cross {
            let shape = rec.scores.shape().to_vec();
            let (g, q, k) = (shape[0], shape[1], shape[2]);
            for gi in 0..g {
                for r in 0..q {
                    let mut row: Vec<f64> = (0..k)
                        .map(|c| rec.scores.data()[(gi * q + r) * k + c])
                        .collect();
                    softmax_row(&mut row);
                    for (c, &val) in row.iter().enumerate() {
                        let w = rec.weights.data()[(gi * q + r) * k + c];
                        assert!((w - val).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn decoder_layer_replay_reproduces_traced_states() {
        let m = tiny_model(6);
        let src = [4, 5, 6, 7, EOS];
        let tgt = [8, 9, 10, EOS];
        let trace = m.trace(&src, &tgt, None).unwrap();
        for layer in 0..m.config.dec_layers {
            let replay = m
                .decoder_layer_replay(
                    layer,
                    &trace.dec_inputs[layer],
                    &trace.cross_k[layer],
                    &trace.cross[layer].values,
                    None,
                )
                .unwrap();
            let want = &trace.dec_outputs[layer];
            for (a, b) in replay.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "layer {layer} replay drifted");
            }
        }
    }

    #[test]
    fn zeroing_a_source_value_changes_the_replayed_states() {
        let m = tiny_model(6);
        let src = [4, 5, 6, 7, EOS];
        let tgt = [8, 9, 10, EOS];
        let trace = m.trace(&src, &tgt, None).unwrap();
        let clean = m
            .decoder_layer_replay(0, &trace.dec_inputs[0], &trace.cross_k[0], &trace.cross[0].values, None)
            .unwrap();
        let zeroed = m
            .decoder_layer_replay(0, &trace.dec_inputs[0], &trace.cross_k[0], &trace.cross[0].values, Some(1))
            .unwrap();
        let diff: f64 = clean
            .iter()
            .zip(zeroed.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "zeroing had no effect");
    }

    #[test]
    fn injection_with_no_spec_is_identical_to_plain_forward() {
        let m = tiny_model(9);
        let batch = batch_of(&[(&[4, 5, EOS], &[6, 7, EOS])]);
        let t1 = Tape::new();
        let f1 = m.forward(&t1, &batch, &ForwardOpts::default()).unwrap();
        let t2 = Tape::new();
        let f2 = m.forward(&t2, &batch, &ForwardOpts::default()).unwrap();
        assert_eq!(t1.value(f1.logits).data(), t2.value(f2.logits).data());
    }

    #[test]
    fn injection_changes_scores_at_the_requested_site_only() {
        let m = tiny_model(10);
        let src = [4, 5, 6, EOS];
        let tgt = [7, 8, EOS];
        let (j, k) = (src.len(), tgt.len());
        let mut maps = Tensor::zeros(vec![1, k, j]);
        for i in 0..k.min(j) {
            maps.data_mut()[i * j + i] = 5.0;
        }
        let spec = InjectionSpec {
            site: Site::Cross,
            compose: ComposeOp::Add,
            head_mask: vec![true, false],
            maps,
        };
        let plain = m.trace(&src, &tgt, None).unwrap();
        let injected = m.trace(&src, &tgt, Some(&spec)).unwrap();
        // Encoder untouched.
        for (a, b) in plain.enc_self.iter().zip(&injected.enc_self) {
            assert_eq!(a.scores.data(), b.scores.data());
        }
        // Cross scores move on head 0 at every layer.
        for (a, b) in plain.cross.iter().zip(&injected.cross) {
            let q = a.scores.shape()[1];
            let kk = a.scores.shape()[2];
            let head0_diff: f64 = (0..q * kk)
                .map(|i| (a.scores.data()[i] - b.scores.data()[i]).abs())
                .sum();
            assert!(head0_diff > 1e-9);
        }
        // At the first decoder layer the masked-out head sees unchanged
        // queries and keys, so its scores must be bit-identical.  (Deeper
        // layers legitimately drift through the residual stream.)
        let (a, b) = (&plain.cross[0], &injected.cross[0]);
        let q = a.scores.shape()[1];
        let kk = a.scores.shape()[2];
        let head1: f64 = (0..q * kk)
            .map(|i| (a.scores.data()[q * kk + i] - b.scores.data()[q * kk + i]).abs())
            .sum();
        assert!(head1 == 0.0, "masked-out head was perturbed at layer 0");
    }

    #[test]
    fn generate_is_deterministic_and_respects_max_len() {
        let m = tiny_model(11);
        let srcs = vec![vec![4, 5, 6, EOS], vec![7, EOS]];
        let a = m.generate(&srcs, None, 64).unwrap();
        let b = m.generate(&srcs, None, 64).unwrap();
        assert_eq!(a, b);
        for ids in &a {
            assert!(ids.len() <= m.config.max_len - 1);
            assert!(ids.iter().all(|&id| id != EOS && id != BOS));
        }
    }

    #[test]
    fn batched_generation_matches_one_by_one() {
        let m = tiny_model(12);
        let srcs = vec![vec![4, 5, 6, EOS], vec![7, 8, EOS], vec![9, EOS]];
        let batched = m.generate(&srcs, None, 16).unwrap();
        for (i, src) in srcs.iter().enumerate() {
            let single = m.generate(&[src.clone()], None, 16).unwrap();
            assert_eq!(single[0], batched[i], "example {i} diverges in batch");
        }
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let m = tiny_model(13);
        for src in [vec![4, 5, 6, EOS], vec![10, 9, EOS]] {
            let greedy = m.generate(&[src.clone()], None, 16).unwrap();
            let beam = m.generate_beam(&src, 1, None).unwrap();
            assert_eq!(greedy[0], beam);
        }
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab_inputs() {
        let m = tiny_model(14);
        let long: Vec<usize> = (0..9).map(|_| 4).chain([EOS]).collect();
        assert!(m.generate(&[long], None, 16).is_err());
        assert!(m.generate(&[vec![99, EOS]], None, 16).is_err());
        assert!(PaddedBatch::new(&[(vec![PAD, PAD], vec![EOS])]).is_err());
        assert!(PaddedBatch::new(&[]).is_err());
    }

    #[test]
    fn loss_decreases_under_a_few_gradient_steps() {
        // Minimal end-to-end training sanity: full-batch descent on two pairs.
        let mut m = tiny_model(15);
        let batch = batch_of(&[(&[4, 5, EOS], &[5, 4, EOS]), (&[6, 7, EOS], &[7, 6, EOS])]);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..10 {
            let tape = Tape::new();
            let opts = ForwardOpts {
                trainable: true,
                ..Default::default()
            };
            let (loss, fwd) = m.loss(&tape, &batch, &opts).unwrap();
            let lv = tape.value(loss).item();
            first.get_or_insert(lv);
            last = lv;
            tape.backward(loss, &Tensor::scalar(1.0)).unwrap();
            // Plain SGD; enough to show the gradients point downhill.
            let mut handles = Vec::new();
            fwd.bound.for_each(&mut |v| handles.push(*v));
            let mut i = 0;
            m.params.for_each_mut(&mut |t| {
                if let Some(g) = tape.grad(handles[i]) {
                    for (tv, gv) in t.data_mut().iter_mut().zip(g.data()) {
                        *tv -= 0.5 * gv;
                    }
                }
                i += 1;
            });
        }
        assert!(
            last < first.unwrap(),
            "loss did not decrease: {first:?} -> {last}"
        );
    }
}
