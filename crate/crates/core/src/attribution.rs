//! Token-level attribution maps for teacher-forced translation pairs.
//!
//! Every method answers the same question for one `(source, target)` pair:
//! *how much did source position `j` matter for predicting target token
//! `k`?* — and returns a `[ls, lt]` matrix (source positions × target
//! steps, both including the closing end-of-sequence marker; no padding is
//! involved since pairs are processed one at a time).
//!
//! The scored quantity is always the logit of the gold target token at its
//! step.  Gradient methods differentiate it with respect to the source
//! *token embeddings* (positional rows excluded), then collapse the
//! embedding axis with an L2 norm.  The two activation-space methods read
//! the traced attention internals instead.
//!
//! Raw maps are unnormalised; composition into a model normalises them
//! (see the map-conditioning module).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{Forward, ForwardOpts, PaddedBatch, Seq2SeqModel};

/// The eight attribution methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Gradient magnitude at the input embeddings.
    Saliency,
    /// Gradient times the embedding itself.
    InputXGradient,
    /// Gradient times activation at the encoder's final states.
    LayerGradientXActivation,
    /// Path integral of gradients from the zero baseline (midpoint rule).
    IntegratedGradients,
    /// Expected gradients over jittered, scaled inputs.
    GradientShap,
    /// Rescale-rule contribution propagation against the zero baseline.
    DeepLift,
    /// Cross-attention weights, averaged over decoder layers and heads.
    Attention,
    /// Per-source value ablation in cross-attention, cosine distance of the
    /// resulting decoder states, averaged over decoder layers.
    ValueZeroing,
}

impl Method {
    pub fn all() -> [Method; 8] {
        [
            Method::Saliency,
            Method::InputXGradient,
            Method::LayerGradientXActivation,
            Method::IntegratedGradients,
            Method::GradientShap,
            Method::DeepLift,
            Method::Attention,
            Method::ValueZeroing,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::InputXGradient => "input_x_gradient",
            Method::LayerGradientXActivation => "layer_gradient_x_activation",
            Method::IntegratedGradients => "integrated_gradients",
            Method::GradientShap => "gradient_shap",
            Method::DeepLift => "deep_lift",
            Method::Attention => "attention",
            Method::ValueZeroing => "value_zeroing",
        }
    }

    pub fn from_name(s: &str) -> Result<Method> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown attribution method {s:?}")))
    }

    /// Whether the method needs gradients (as opposed to traced activations).
    pub fn uses_gradients(self) -> bool {
        !matches!(self, Method::Attention | Method::ValueZeroing)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Midpoint-rule steps for the path-integral method.
    pub ig_steps: usize,
    /// Sample count for expected gradients.
    pub shap_samples: usize,
    /// Noise scale for expected gradients, as a fraction of the RMS
    /// embedding magnitude.
    pub shap_sigma_scale: f64,
    /// Seed for the sampling methods.
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            ig_steps: 16,
            shap_samples: 8,
            shap_sigma_scale: 0.05,
            seed: 0,
        }
    }
}

/// Compute the attribution map of one pair under one method.
/// `src_ids` and `tgt_ids` both end in the end-of-sequence id.
pub fn attribute(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    tgt_ids: &[usize],
    method: Method,
    cfg: &AttributionConfig,
) -> Result<Tensor> {
    match method {
        Method::Saliency => grad_map(model, src_ids, tgt_ids, |g, _e| Ok(l2_rows(g))),
        Method::InputXGradient => {
            grad_map(model, src_ids, tgt_ids, |g, e| Ok(l2_rows(&g.hadamard(e)?)))
        }
        Method::LayerGradientXActivation => encoder_state_map(model, src_ids, tgt_ids),
        Method::IntegratedGradients => {
            Ok(integrated_gradients(model, src_ids, tgt_ids, cfg.ig_steps)?.l2)
        }
        Method::GradientShap => gradient_shap(model, src_ids, tgt_ids, cfg),
        Method::DeepLift => deep_lift(model, src_ids, tgt_ids),
        Method::Attention => attention_map(model, src_ids, tgt_ids),
        Method::ValueZeroing => value_zeroing(model, src_ids, tgt_ids),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// L2 norm of each row: `[r, d]` → `[r]`-vector (as Vec).
fn l2_rows(m: &Tensor) -> Vec<f64> {
    m.data()
        .chunks_exact(m.cols())
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// The model's source token embeddings for `ids`, `[ls, d]`.
fn source_embeddings(model: &Seq2SeqModel, ids: &[usize]) -> Result<Tensor> {
    let d = model.config.d_model;
    let table = &model.params.src_embed;
    let mut out = Tensor::zeros(vec![ids.len(), d]);
    for (r, &id) in ids.iter().enumerate() {
        if id >= model.config.src_vocab {
            return Err(Error::InvalidInput(format!(
                "source id {id} outside vocab {}",
                model.config.src_vocab
            )));
        }
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(table.row(id));
    }
    Ok(out)
}

struct Setup {
    batch: PaddedBatch,
    /// Gold target id per step (the scored class at each row).
    gold: Vec<usize>,
}

fn setup(src_ids: &[usize], tgt_ids: &[usize]) -> Result<Setup> {
    let batch = PaddedBatch::new(&[(src_ids.to_vec(), tgt_ids.to_vec())])?;
    let gold = batch.tgt_out.clone();
    Ok(Setup { batch, gold })
}

/// Forward the pair with `emb` standing in for the source token embeddings,
/// and append one score node per target step (gold-token logit).
fn forward_with_scores(
    model: &Seq2SeqModel,
    tape: &Tape,
    s: &Setup,
    emb: Tensor,
) -> Result<(Forward, Vec<Var>)> {
    let opts = ForwardOpts {
        trainable: false,
        injection: None,
        want_trace: false,
        src_emb_override: Some(emb),
    };
    let fwd = model.forward(tape, &s.batch, &opts)?;
    let picks = s
        .gold
        .iter()
        .enumerate()
        .map(|(k, &gold)| tape.pick_entry(fwd.logits, k, gold))
        .collect::<Result<Vec<_>>>()?;
    Ok((fwd, picks))
}

/// One forward pass, then for each target step a backward sweep; `collapse`
/// turns the per-step embedding gradient (and the embeddings) into one map
/// column.
fn grad_map(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    tgt_ids: &[usize],
    collapse: impl Fn(&Tensor, &Tensor) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    let s = setup(src_ids, tgt_ids)?;
    let emb = source_embeddings(model, src_ids)?;
    let tape = Tape::new();
    let (fwd, picks) = forward_with_scores(model, &tape, &s, emb.clone())?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let mut map = Tensor::zeros(vec![ls, lt]);
    for (k, &pick) in picks.iter().enumerate() {
        tape.backward(pick, &Tensor::scalar(1.0))?;
        let g = tape
            .grad(fwd.src_token_emb)
            .ok_or_else(|| Error::Pipeline("no gradient reached the embeddings".into()))?;
        let col = collapse(&g, &emb)?;
        for j in 0..ls {
            map.set2(j, k, col[j]);
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Gradient × activation at the encoder output states.
fn encoder_state_map(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    tgt_ids: &[usize],
) -> Result<Tensor> {
    let s = setup(src_ids, tgt_ids)?;
    let emb = source_embeddings(model, src_ids)?;
    let tape = Tape::new();
    let (fwd, picks) = forward_with_scores(model, &tape, &s, emb)?;
    let mem = tape.value(fwd.memory);
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let mut map = Tensor::zeros(vec![ls, lt]);
    for (k, &pick) in picks.iter().enumerate() {
        tape.backward(pick, &Tensor::scalar(1.0))?;
        let g = tape
            .grad(fwd.memory)
            .ok_or_else(|| Error::Pipeline("no gradient reached the encoder states".into()))?;
        let col = l2_rows(&g.hadamard(&mem)?);
        for j in 0..ls {
            map.set2(j, k, col[j]);
        }
    }
    Ok(map)
}

/// Full output of the path-integral method, exposing the signed
/// contributions needed to audit the completeness identity.
pub struct IgOutput {
    /// L2-collapsed map, `[ls, lt]`.
    pub l2: Tensor,
    /// Dot-collapsed map (signed contributions), `[ls, lt]` — satisfies the
    /// completeness identity against `delta` up to quadrature error.
    pub dot: Tensor,
    /// Per-step score difference `S(x) − S(baseline)`, `[lt]`.
    pub delta: Vec<f64>,
}

/// Midpoint-rule path integral of gradients from the zero-embedding
/// baseline to the true embeddings.
pub fn integrated_gradients(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    tgt_ids: &[usize],
    steps: usize,
) -> Result<IgOutput> {
    if steps == 0 {
        return Err(Error::InvalidInput("path integral needs ≥ 1 step".into()));
    }
    let s = setup(src_ids, tgt_ids)?;
    let emb = source_embeddings(model, src_ids)?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let d = model.config.d_model;
    // Accumulated mean gradient per target step.
    let mut acc = vec![Tensor::zeros(vec![ls, d]); lt];
    for m in 0..steps {
        let alpha = (m as f64 + 0.5) / steps as f64;
        let point = emb.scale(alpha);
        let tape = Tape::new();
        let (fwd, picks) = forward_with_scores(model, &tape, &s, point)?;
        for (k, &pick) in picks.iter().enumerate() {
            tape.backward(pick, &Tensor::scalar(1.0))?;
            let g = tape
                .grad(fwd.src_token_emb)
                .ok_or_else(|| Error::Pipeline("no gradient reached the embeddings".into()))?;
            for (a, gv) in acc[k].data_mut().iter_mut().zip(g.data()) {
                *a += gv / steps as f64;
            }
        }
    }
    // Score at the endpoints for the completeness identity.
    let score_at = |e: Tensor| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (_, picks) = forward_with_scores(model, &tape, &s, e)?;
        Ok(picks.iter().map(|&p| tape.value(p).item()).collect())
    };
    let s_actual = score_at(emb.clone())?;
    let s_base = score_at(Tensor::zeros(vec![ls, d]))?;
    let delta: Vec<f64> = s_actual
        .iter()
        .zip(&s_base)
        .map(|(a, b)| a - b)
        .collect();

    let mut l2 = Tensor::zeros(vec![ls, lt]);
    let mut dot = Tensor::zeros(vec![ls, lt]);
    for (k, mean_grad) in acc.iter().enumerate() {
        let contrib = mean_grad.hadamard(&emb)?;
        let l2col = l2_rows(&contrib);
        for j in 0..ls {
            let row_sum: f64 = contrib.row(j).iter().sum();
            dot.set2(j, k, row_sum);
            l2.set2(j, k, l2col[j]);
        }
    }
    Ok(IgOutput { l2, dot, delta })
}

/// Expected gradients: average `∇S ∘ x` over inputs `α · (x + ε)` with
/// `α ~ U[0,1)` and Gaussian `ε` scaled to a fraction of the embedding RMS.
fn gradient_shap(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    tgt_ids: &[usize],
    cfg: &AttributionConfig,
) -> Result<Tensor> {
    if cfg.shap_samples == 0 {
        return Err(Error::InvalidInput("expected gradients need ≥ 1 sample".into()));
    }
    let s = setup(src_ids, tgt_ids)?;
    let emb = source_embeddings(model, src_ids)?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let d = model.config.d_model;
    let rms = (emb.data().iter().map(|v| v * v).sum::<f64>() / emb.len() as f64).sqrt();
    let sigma = cfg.shap_sigma_scale * rms;
    let mut rng = Rng::new(cfg.seed).split("expected-gradients");
    let mut acc = vec![Tensor::zeros(vec![ls, d]); lt];
    for sample in 0..cfg.shap_samples {
        let mut r = rng.split(&format!("sample{sample}"));
        let alpha = r.uniform();
        let point = Tensor::from_vec(
            vec![ls, d],
            emb.data()
                .iter()
                .map(|&v| alpha * (v + sigma * r.normal()))
                .collect(),
        )?;
        let tape = Tape::new();
        let (fwd, picks) = forward_with_scores(model, &tape, &s, point)?;
        for (k, &pick) in picks.iter().enumerate() {
            tape.backward(pick, &Tensor::scalar(1.0))?;
            let g = tape
                .grad(fwd.src_token_emb)
                .ok_or_else(|| Error::Pipeline("no gradient reached the embeddings".into()))?;
            for (a, gv) in acc[k].data_mut().iter_mut().zip(g.data()) {
                *a += gv / cfg.shap_samples as f64;
            }
        }
    }
    let mut map = Tensor::zeros(vec![ls, lt]);
    for (k, mean_grad) in acc.iter().enumerate() {
        let col = l2_rows(&mean_grad.hadamard(&emb)?);
        for j in 0..ls {
            map.set2(j, k, col[j]);
        }
    }
    Ok(map)
}

/// Rescale-rule contributions against the zero-embedding baseline: the
/// actual and reference passes are built with identical graph structure,
/// and elementwise nonlinearities backpropagate secant slopes
/// `Δout/Δin` instead of local derivatives.
fn deep_lift(model: &Seq2SeqModel, src_ids: &[usize], tgt_ids: &[usize]) -> Result<Tensor> {
    let s = setup(src_ids, tgt_ids)?;
    let emb = source_embeddings(model, src_ids)?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let d = model.config.d_model;

    let actual_tape = Tape::new();
    let (fwd, picks) = forward_with_scores(model, &actual_tape, &s, emb.clone())?;
    let ref_tape = Tape::new();
    let (_, _) = forward_with_scores(model, &ref_tape, &s, Tensor::zeros(vec![ls, d]))?;

    let mut map = Tensor::zeros(vec![ls, lt]);
    for (k, &pick) in picks.iter().enumerate() {
        actual_tape.backward_rescale(&ref_tape, pick, &Tensor::scalar(1.0))?;
        let g = actual_tape
            .grad(fwd.src_token_emb)
            .ok_or_else(|| Error::Pipeline("no multiplier reached the embeddings".into()))?;
        // Contribution = multiplier ∘ (x − baseline); the baseline is zero.
        let col = l2_rows(&g.hadamard(&emb)?);
        for j in 0..ls {
            map.set2(j, k, col[j]);
        }
    }
    Ok(map)
}

/// Cross-attention weights aggregated over decoder layers and heads, then
/// transposed to source × target.
fn attention_map(model: &Seq2SeqModel, src_ids: &[usize], tgt_ids: &[usize]) -> Result<Tensor> {
    let trace = model.trace(src_ids, tgt_ids, None)?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let h = model.config.heads;
    let layers = trace.cross.len();
    let mut map = Tensor::zeros(vec![ls, lt]);
    let denom = (layers * h) as f64;
    for rec in &trace.cross {
        // weights: [h, lt, ls]
        for hi in 0..h {
            for t in 0..lt {
                for j in 0..ls {
                    let w = rec.weights.data()[(hi * lt + t) * ls + j];
                    map.data_mut()[j * lt + t] += w / denom;
                }
            }
        }
    }
    Ok(map)
}

/// For every decoder layer, re-run the layer with source position `j`'s
/// cross-attention value vectors zeroed (all heads) and measure the cosine
/// distance of each output state from the clean run; average over layers.
fn value_zeroing(model: &Seq2SeqModel, src_ids: &[usize], tgt_ids: &[usize]) -> Result<Tensor> {
    let trace = model.trace(src_ids, tgt_ids, None)?;
    let (ls, lt) = (src_ids.len(), tgt_ids.len());
    let layers = model.config.dec_layers;
    let d = model.config.d_model;
    let mut map = Tensor::zeros(vec![ls, lt]);
    for layer in 0..layers {
        let clean = &trace.dec_outputs[layer];
        for j in 0..ls {
            let perturbed = model.decoder_layer_replay(
                layer,
                &trace.dec_inputs[layer],
                &trace.cross_k[layer],
                &trace.cross[layer].values,
                Some(j),
            )?;
            for t in 0..lt {
                let a = &clean.data()[t * d..(t + 1) * d];
                let b = &perturbed.data()[t * d..(t + 1) * d];
                map.data_mut()[j * lt + t] += (1.0 - cosine(a, b)) / layers as f64;
            }
        }
    }
    Ok(map)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 && nb < 1e-12 {
        return 1.0; // both zero: unchanged
    }
    if na < 1e-12 || nb < 1e-12 {
        return 0.0; // one collapsed to zero: fully changed
    }
    dot / (na * nb)
}
