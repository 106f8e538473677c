//! Adam optimisation and the teacher/student training loop.
//!
//! Batching is deterministic: examples are ordered by length (so batches pad
//! little), cut into fixed-size chunks, and only the chunk order is shuffled
//! each epoch from a seeded stream.  Early stopping watches validation
//! cross-entropy with a configurable patience; the best-scoring parameters
//! are restored when training ends.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ComposeOp, Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{
    stack_blocks, ForwardOpts, InjectionSpec, ModelParams, PaddedBatch, Seq2SeqModel, Site,
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.  Slots are kept in walk order; the same
/// optimiser instance must always be fed the same parameter structure.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update.  `walk` must visit the parameters in a fixed order;
    /// `grads` is aligned with that order.
    pub fn update<F>(&mut self, walk: F, grads: &[Tensor]) -> Result<()>
    where
        F: FnOnce(&mut dyn FnMut(&mut Tensor)),
    {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps);
        let first = self.m.is_empty();
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        let mut problem: Option<String> = None;
        walk(&mut |p: &mut Tensor| {
            if problem.is_some() {
                return;
            }
            if first {
                m.push(Tensor::zeros(p.shape().to_vec()));
                v.push(Tensor::zeros(p.shape().to_vec()));
            }
            if i >= grads.len() || i >= m.len() {
                problem = Some("optimiser walk longer than gradient list".to_string());
                return;
            }
            let g = &grads[i];
            if g.shape() != p.shape() {
                problem = Some(format!(
                    "gradient {i} shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
                return;
            }
            let (ms, vs) = (m[i].data_mut(), v[i].data_mut());
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gv = g.data()[j];
                ms[j] = b1 * ms[j] + (1.0 - b1) * gv;
                vs[j] = b2 * vs[j] + (1.0 - b2) * gv * gv;
                let mh = ms[j] / c1;
                let vh = vs[j] / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
        if let Some(p) = problem {
            return Err(Error::InvalidInput(p));
        }
        if i != grads.len() {
            return Err(Error::InvalidInput(format!(
                "optimiser walk visited {i} tensors for {} gradients",
                grads.len()
            )));
        }
        Ok(())
    }
}

/// Read the gradient of every bound parameter after a backward sweep,
/// zero-filling parameters the sweep never reached.
pub fn collect_grads(tape: &Tape, bound: &ModelParams<Var>) -> Vec<Tensor> {
    let mut handles = Vec::new();
    bound.for_each(&mut |v| handles.push(*v));
    handles
        .into_iter()
        .map(|h| {
            tape.grad(h)
                .unwrap_or_else(|| Tensor::zeros(tape.shape_of(h)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Injection plumbing for training/evaluation
// ---------------------------------------------------------------------------

/// Maps to inject during training or evaluation: one oriented
/// `[max_len, max_len]` square per example, aligned with the example list.
#[derive(Debug, Clone)]
pub struct MapBank {
    pub site: Site,
    pub compose: ComposeOp,
    pub head_mask: Vec<bool>,
    pub squares: Vec<Tensor>,
}

impl MapBank {
    /// Cut the per-batch `[b, q, k]` block for `site` out of the stored
    /// squares of the examples at `indices`.
    fn batch_spec(&self, indices: &[usize], batch: &PaddedBatch) -> Result<InjectionSpec> {
        let picked: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.squares
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no map for example {i}")))
            })
            .collect::<Result<_>>()?;
        let (rows, cols) = match self.site {
            Site::EncoderSelf => (batch.ls, batch.ls),
            Site::Cross => (batch.lt, batch.ls),
        };
        Ok(InjectionSpec {
            site: self.site,
            compose: self.compose,
            head_mask: self.head_mask.clone(),
            maps: stack_blocks(&picked, rows, cols),
        })
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Indices grouped into batches: length-sorted so padding is minimal.
fn length_sorted_batches(
    pairs: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len(), i));
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

fn assemble(
    pairs: &[(Vec<usize>, Vec<usize>)],
    indices: &[usize],
) -> Result<PaddedBatch> {
    let chosen: Vec<(Vec<usize>, Vec<usize>)> =
        indices.iter().map(|&i| pairs[i].clone()).collect();
    PaddedBatch::new(&chosen)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement tolerated before stopping;
    /// `0` disables early stopping.
    pub patience: usize,
    /// Seed for the per-epoch batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_ce: Vec<f64>,
    pub val_ce: Vec<f64>,
    pub best_val_ce: f64,
    pub stopped_early: bool,
}

/// Train `model` on `train_pairs`, optionally composing `maps` into its
/// attention (the student regime — the same maps are applied at validation).
/// Returns with the best-validation parameters restored.
pub fn train_model(
    model: &mut Seq2SeqModel,
    train_pairs: &[(Vec<usize>, Vec<usize>)],
    valid_pairs: &[(Vec<usize>, Vec<usize>)],
    maps: Option<&MapBank>,
    valid_maps: Option<&MapBank>,
    cfg: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<TrainReport> {
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    if let Some(bank) = maps {
        if bank.squares.len() != train_pairs.len() {
            return Err(Error::InvalidInput(format!(
                "{} maps for {} training examples",
                bank.squares.len(),
                train_pairs.len()
            )));
        }
    }
    let mut rng = Rng::new(cfg.seed).split("batch-order");
    let mut adam = Adam::new(cfg.adam.clone());
    let batches = length_sorted_batches(train_pairs, cfg.batch_size);
    let mut report = TrainReport {
        epochs_run: 0,
        train_ce: Vec::new(),
        val_ce: Vec::new(),
        best_val_ce: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params: Option<ModelParams<Tensor>> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        rng.split(&format!("epoch{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for &bi in &order {
            let indices = &batches[bi];
            let batch = assemble(train_pairs, indices)?;
            let spec = maps.map(|b| b.batch_spec(indices, &batch)).transpose()?;
            let tape = Tape::new();
            let opts = ForwardOpts {
                trainable: true,
                injection: spec.as_ref(),
                want_trace: false,
                src_emb_override: None,
            };
            let (loss, fwd) = model.loss(&tape, &batch, &opts)?;
            let n_valid = batch.valid_targets().iter().filter(|&&v| v).count();
            loss_sum += tape.value(loss).item() * n_valid as f64;
            token_sum += n_valid;
            tape.backward(loss, &Tensor::scalar(1.0))?;
            let grads = collect_grads(&tape, &fwd.bound);
            adam.update(|f| model.params.for_each_mut(&mut |t| f(t)), &grads)?;
        }
        let train_ce = loss_sum / token_sum.max(1) as f64;
        report.train_ce.push(train_ce);
        report.epochs_run = epoch + 1;

        if valid_pairs.is_empty() {
            log(&format!("epoch {epoch}: train ce {train_ce:.4}"));
            continue;
        }
        let val_ce = evaluate_ce(model, valid_pairs, valid_maps, cfg.batch_size)?;
        report.val_ce.push(val_ce);
        log(&format!(
            "epoch {epoch}: train ce {train_ce:.4}  val ce {val_ce:.4}"
        ));
        if val_ce < report.best_val_ce {
            report.best_val_ce = val_ce;
            best_params = Some(model.params.map(&mut |t: &Tensor| t.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                report.stopped_early = true;
                log(&format!(
                    "stopping early at epoch {epoch}: no improvement for {since_best} epochs"
                ));
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    if report.best_val_ce.is_infinite() {
        report.best_val_ce = *report.train_ce.last().unwrap_or(&f64::NAN);
    }
    Ok(report)
}

/// Token-weighted mean cross-entropy over `pairs` (teacher-forced).
pub fn evaluate_ce(
    model: &Seq2SeqModel,
    pairs: &[(Vec<usize>, Vec<usize>)],
    maps: Option<&MapBank>,
    batch_size: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no examples to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let mut token_sum = 0usize;
    for indices in length_sorted_batches(pairs, batch_size) {
        let batch = assemble(pairs, &indices)?;
        let spec = maps.map(|b| b.batch_spec(&indices, &batch)).transpose()?;
        let tape = Tape::new();
        let opts = ForwardOpts {
            trainable: false,
            injection: spec.as_ref(),
            want_trace: false,
            src_emb_override: None,
        };
        let (loss, _) = model.loss(&tape, &batch, &opts)?;
        let n_valid = batch.valid_targets().iter().filter(|&&v| v).count();
        loss_sum += tape.value(loss).item() * n_valid as f64;
        token_sum += n_valid;
    }
    Ok(loss_sum / token_sum.max(1) as f64)
}

/// Teacher-forced next-token accuracy over non-padding positions.
pub fn token_accuracy(
    model: &Seq2SeqModel,
    pairs: &[(Vec<usize>, Vec<usize>)],
    maps: Option<&MapBank>,
    batch_size: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no examples to evaluate".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for indices in length_sorted_batches(pairs, batch_size) {
        let batch = assemble(pairs, &indices)?;
        let spec = maps.map(|b| b.batch_spec(&indices, &batch)).transpose()?;
        let tape = Tape::new();
        let opts = ForwardOpts {
            trainable: false,
            injection: spec.as_ref(),
            want_trace: false,
            src_emb_override: None,
        };
        let fwd = model.forward(&tape, &batch, &opts)?;
        let logits = tape.value(fwd.logits);
        let v = logits.cols();
        for (row, &target) in batch.tgt_out.iter().enumerate() {
            if target == crate::data::PAD {
                continue;
            }
            total += 1;
            let slice = &logits.data()[row * v..(row + 1) * v];
            let mut best = 0;
            for (i, &x) in slice.iter().enumerate() {
                if x > slice[best] {
                    best = i;
                }
            }
            if best == target {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
