//! Reverse-mode autodiff on a flat tape.
//!
//! Every forward op appends one node (output value + an op record naming its
//! inputs) to the tape, so the node list is already a topological order and
//! `backward` is a single reverse sweep.  Ops are an enum, not closures,
//! which keeps the whole graph inspectable and makes replay deterministic:
//! the same op sequence on the same inputs reproduces identical bytes.
//!
//! Two sweeps are provided: `backward` (ordinary vector–Jacobian products)
//! and `backward_rescale`, which pairs this tape with a reference tape built
//! from the same op sequence and replaces the local derivative of each
//! elementwise nonlinearity with the secant slope Δout/Δin between the two
//! runs — the multiplier rule used by reference-based attribution.  On
//! purely linear + elementwise paths those multipliers make input
//! contributions sum exactly to the output difference.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{mm_nn_acc, mm_nt_acc, mm_tn_acc, Tensor};

/// Additive pre-softmax penalty for masked positions.
pub const MASK_NEG: f64 = -1e9;
/// Layer-normalisation variance guard.
pub const LN_EPS: f64 = 1e-5;
/// Below this absolute input difference the rescale sweep falls back to the
/// local derivative to avoid dividing by a vanishing Δin.
const RESCALE_DELTA_MIN: f64 = 1e-9;

/// Handle to a tape node.  Plain index; cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How an injected map is composed with raw attention scores.
/// (Defined here because the tape op that applies it lives here; the
/// higher-level composition API is in `injection`.)
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeOp {
    Add,
    Multiply,
    Average,
    Replace,
}

impl ComposeOp {
    pub fn all() -> [ComposeOp; 4] {
        [
            ComposeOp::Add,
            ComposeOp::Multiply,
            ComposeOp::Average,
            ComposeOp::Replace,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            ComposeOp::Add => "add",
            ComposeOp::Multiply => "multiply",
            ComposeOp::Average => "average",
            ComposeOp::Replace => "replace",
        }
    }

    pub fn from_name(s: &str) -> crate::error::Result<ComposeOp> {
        ComposeOp::all()
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                crate::error::Error::InvalidInput(format!(
                    "unknown composition operator '{s}' (expected add, multiply, average or replace)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] · [k,n]`
    MatMul { a: Var, b: Var },
    /// `[m,k] · [n,k]ᵀ`
    MatMulNT { a: Var, b: Var },
    /// `[g,m,k] · [g,k,n]`, batched over the leading group axis.
    Bmm { a: Var, b: Var },
    /// `[g,m,k] · [g,n,k]ᵀ`
    BmmNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `[r,n] + [n]`, the row vector broadcast over rows.
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// Softmax over the last axis (mask already folded into the output;
    /// the backward rule needs only the output values).
    Softmax { x: Var },
    /// Last-axis layer normalisation with learned gain and bias.
    LayerNorm { x: Var, gain: Var, bias: Var },
    Swish { x: Var },
    Gelu { x: Var },
    /// Row-gather from `table` at `ids`.
    Embed { table: Var, ids: Vec<usize> },
    /// Column-wise concatenation of 2-D tensors with equal row counts.
    Concat { parts: Vec<Var> },
    /// `[b*l, h*dk] → [b*h, l, dk]`
    SplitHeads { x: Var, batch: usize, heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { x: Var, batch: usize, heads: usize },
    /// Mean negative log-likelihood of `targets` over positions where
    /// `valid`, from logits `[r, v]`.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
    },
    /// Single matrix entry as a scalar.
    PickEntry { x: Var, row: usize, col: usize },
    /// Compose an external map into attention scores `[b*h, q, k]` on the
    /// heads selected by `head_mask`; `map` is `[b, q, k]`.
    Inject {
        scores: Var,
        map: Tensor,
        compose: ComposeOp,
        head_mask: Vec<bool>,
    },
    /// `out[t,i] = Σ_h gate[t,h] · scores[h,t,i]` — per-position mixture of
    /// per-head score rows.
    HeadMix { scores: Var, gate: Var },
    /// Mean over valid rows of KL(gold_row ‖ softmax(logits_row)).
    KlRows {
        logits: Var,
        gold: Tensor,
        valid: Vec<bool>,
    },
    /// Sum of all elements.
    Sum { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Bmm { .. } => "bmm",
            Op::BmmNT { .. } => "bmm_nt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Swish { .. } => "swish",
            Op::Gelu { .. } => "gelu",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::PickEntry { .. } => "pick_entry",
            Op::Inject { .. } => "inject",
            Op::HeadMix { .. } => "head_mix",
            Op::KlRows { .. } => "kl_rows",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

/// The tape itself.  Interior mutability lets ops take `&self`, so `Var`
/// handles stay plain copyable indices.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input (data, masks, frozen weights).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Clone of a node's value.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Clone of a node's gradient, if the last backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // -- forward ops --------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let ([m, k], [k2, n]) = (dims2("matmul", ta)?, dims2("matmul", tb)?);
            if k != k2 {
                return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
            }
            let mut out = Tensor::zeros(vec![m, n]);
            mm_nn_acc(out.data_mut(), ta.data(), tb.data(), m, k, n);
            (out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let ([m, k], [n, k2]) = (dims2("matmul_nt", ta)?, dims2("matmul_nt", tb)?);
            if k != k2 {
                return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
            }
            let mut out = Tensor::zeros(vec![m, n]);
            mm_nt_acc(out.data_mut(), ta.data(), tb.data(), m, k, n);
            (out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::MatMulNT { a, b }))
    }

    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let ([g, m, k], [g2, k2, n]) = (dims3("bmm", ta)?, dims3("bmm", tb)?);
            if g != g2 || k != k2 {
                return Err(Error::shape(
                    "bmm",
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            let mut out = Tensor::zeros(vec![g, m, n]);
            for gi in 0..g {
                mm_nn_acc(
                    &mut out.data_mut()[gi * m * n..(gi + 1) * m * n],
                    &ta.data()[gi * m * k..(gi + 1) * m * k],
                    &tb.data()[gi * k * n..(gi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            (out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::Bmm { a, b }))
    }

    pub fn bmm_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let ([g, m, k], [g2, n, k2]) = (dims3("bmm_nt", ta)?, dims3("bmm_nt", tb)?);
            if g != g2 || k != k2 {
                return Err(Error::shape(
                    "bmm_nt",
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            let mut out = Tensor::zeros(vec![g, m, n]);
            for gi in 0..g {
                mm_nt_acc(
                    &mut out.data_mut()[gi * m * n..(gi + 1) * m * n],
                    &ta.data()[gi * m * k..(gi + 1) * m * k],
                    &tb.data()[gi * n * k..(gi + 1) * n * k],
                    m,
                    k,
                    n,
                );
            }
            (out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::BmmNT { a, b }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::shape(
                    "add",
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            (
                ta.add(tb)?,
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        Ok(self.push(out, needs, Op::Add { a, b }))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (&nodes[a.0].value, &nodes[row.0].value);
            let n = *ta.shape().last().ok_or_else(|| {
                Error::shape("add_row", "0-d input".to_string())
            })?;
            if tr.shape() != [n] {
                return Err(Error::shape(
                    "add_row",
                    format!("row {:?} vs last dim {}", tr.shape(), n),
                ));
            }
            let mut out = ta.clone();
            let rowd = tr.data();
            for chunk in out.data_mut().chunks_exact_mut(n) {
                for (o, r) in chunk.iter_mut().zip(rowd) {
                    *o += r;
                }
            }
            (out, nodes[a.0].needs_grad || nodes[row.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::AddRow { a, row }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.hadamard(&nodes[b.0].value)?,
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        Ok(self.push(out, needs, Op::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.scale(c), nodes[a.0].needs_grad)
        };
        self.push(out, needs, Op::Scale { a, c })
    }

    /// Softmax over the last axis.  `mask`, if given, is added to the input
    /// first (use `MASK_NEG` entries to switch positions off); it is a
    /// constant and receives no gradient.
    pub fn softmax(&self, x: Var, mask: Option<Tensor>) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if let Some(m) = &mask {
                if m.shape() != tx.shape() {
                    return Err(Error::shape(
                        "softmax",
                        format!("mask {:?} vs input {:?}", m.shape(), tx.shape()),
                    ));
                }
            }
            let n = *tx
                .shape()
                .last()
                .ok_or_else(|| Error::shape("softmax", "0-d input".to_string()))?;
            let mut out = tx.clone();
            if let Some(m) = &mask {
                for (o, mv) in out.data_mut().iter_mut().zip(m.data()) {
                    *o += mv;
                }
            }
            for row in out.data_mut().chunks_exact_mut(n) {
                softmax_row(row);
            }
            (out, nodes[x.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::Softmax { x }))
    }

    /// Last-axis layer normalisation: `(x − μ)/√(σ² + ε) · gain + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let n = *tx
                .shape()
                .last()
                .ok_or_else(|| Error::shape("layer_norm", "0-d input".to_string()))?;
            if tg.shape() != [n] || tb.shape() != [n] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("gain {:?} bias {:?} vs width {}", tg.shape(), tb.shape(), n),
                ));
            }
            let mut out = tx.clone();
            let (g, b) = (tg.data(), tb.data());
            for row in out.data_mut().chunks_exact_mut(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..n {
                    row[j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
            let needs =
                nodes[x.0].needs_grad || nodes[gain.0].needs_grad || nodes[bias.0].needs_grad;
            (out, needs)
        };
        Ok(self.push(out, needs, Op::LayerNorm { x, gain, bias }))
    }

    pub fn swish(&self, x: Var) -> Var {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(swish), nodes[x.0].needs_grad)
        };
        self.push(out, needs, Op::Swish { x })
    }

    pub fn gelu(&self, x: Var) -> Var {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(gelu), nodes[x.0].needs_grad)
        };
        self.push(out, needs, Op::Gelu { x })
    }

    /// Gather rows `ids` from `table` (`[v, d]` → `[ids.len(), d]`).
    pub fn embed(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let [v, d] = dims2("embed", tt)?;
            let mut out = Tensor::zeros(vec![ids.len(), d]);
            for (r, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::InvalidInput(format!(
                        "embedding id {id} out of range (table has {v} rows)"
                    )));
                }
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            (out, nodes[table.0].needs_grad)
        };
        Ok(self.push(
            out,
            needs,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let rows = dims2("concat", &nodes[parts[0].0].value)?[0];
            let mut total = 0usize;
            for p in parts {
                let [r, c] = dims2("concat", &nodes[p.0].value)?;
                if r != rows {
                    return Err(Error::shape("concat", format!("row counts {rows} vs {r}")));
                }
                total += c;
            }
            let mut out = Tensor::zeros(vec![rows, total]);
            let mut col = 0usize;
            for p in parts {
                let t = &nodes[p.0].value;
                let c = t.shape()[1];
                for r in 0..rows {
                    out.data_mut()[r * total + col..r * total + col + c]
                        .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                col += c;
            }
            let needs = parts.iter().any(|p| nodes[p.0].needs_grad);
            (out, needs)
        };
        Ok(self.push(
            out,
            needs,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Regroup `[batch*len, heads*dk]` into `[batch*heads, len, dk]`.
    pub fn split_heads(&self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let [rows, d] = dims2("split_heads", tx)?;
            if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
                return Err(Error::shape(
                    "split_heads",
                    format!("rows {rows} batch {batch} width {d} heads {heads}"),
                ));
            }
            let len = rows / batch;
            let dk = d / heads;
            let mut out = Tensor::zeros(vec![batch * heads, len, dk]);
            flat_to_split(out.data_mut(), tx.data(), batch, len, heads, dk);
            (out, nodes[x.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::SplitHeads { x, batch, heads }))
    }

    /// Inverse of `split_heads`: `[batch*heads, len, dk]` → `[batch*len, heads*dk]`.
    pub fn merge_heads(&self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let [g, len, dk] = dims3("merge_heads", tx)?;
            if batch == 0 || heads == 0 || g != batch * heads {
                return Err(Error::shape(
                    "merge_heads",
                    format!("groups {g} vs batch {batch} × heads {heads}"),
                ));
            }
            let mut out = Tensor::zeros(vec![batch * len, heads * dk]);
            split_to_flat(out.data_mut(), tx.data(), batch, len, heads, dk);
            (out, nodes[x.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::MergeHeads { x, batch, heads }))
    }

    /// Mean cross-entropy of `targets` under `logits` rows, counting only
    /// positions where `valid` is true.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let [r, v] = dims2("cross_entropy", tl)?;
            if targets.len() != r || valid.len() != r {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{r} rows vs {} targets / {} valid", targets.len(), valid.len()),
                ));
            }
            let n_valid = valid.iter().filter(|&&b| b).count();
            if n_valid == 0 {
                return Err(Error::InvalidInput(
                    "cross_entropy: no valid positions".to_string(),
                ));
            }
            let mut total = 0.0;
            for row in 0..r {
                if !valid[row] {
                    continue;
                }
                let t = targets[row];
                if t >= v {
                    return Err(Error::InvalidInput(format!(
                        "cross_entropy: target {t} out of vocab {v}"
                    )));
                }
                let slice = &tl.data()[row * v..(row + 1) * v];
                total -= log_softmax_at(slice, t);
            }
            (
                Tensor::scalar(total / n_valid as f64),
                nodes[logits.0].needs_grad,
            )
        };
        Ok(self.push(
            out,
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
            },
        ))
    }

    /// One entry of a 2-D tensor as a scalar node.
    pub fn pick_entry(&self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let [r, c] = dims2("pick_entry", tx)?;
            if row >= r || col >= c {
                return Err(Error::shape(
                    "pick_entry",
                    format!("({row},{col}) outside [{r},{c}]"),
                ));
            }
            (Tensor::scalar(tx.get2(row, col)), nodes[x.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::PickEntry { x, row, col }))
    }

    /// Compose `map` (`[b, q, k]`) into attention scores (`[b*h, q, k]`) on
    /// the heads where `head_mask` is true; other heads pass through.
    pub fn inject(
        &self,
        scores: Var,
        map: Tensor,
        compose: ComposeOp,
        head_mask: &[bool],
    ) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[scores.0].value;
            let [g, q, k] = dims3("inject", ts)?;
            let heads = head_mask.len();
            if heads == 0 || g % heads != 0 {
                return Err(Error::shape(
                    "inject",
                    format!("groups {g} not divisible by heads {heads}"),
                ));
            }
            let b = g / heads;
            if map.shape() != [b, q, k] {
                return Err(Error::shape(
                    "inject",
                    format!("map {:?} vs scores [{b},{q},{k}]", map.shape()),
                ));
            }
            let mut out = ts.clone();
            let plane = q * k;
            for gi in 0..g {
                let (bi, hi) = (gi / heads, gi % heads);
                if !head_mask[hi] {
                    continue;
                }
                let e = &map.data()[bi * plane..(bi + 1) * plane];
                let s = &mut out.data_mut()[gi * plane..(gi + 1) * plane];
                match compose {
                    ComposeOp::Add => {
                        for (sv, ev) in s.iter_mut().zip(e) {
                            *sv += ev;
                        }
                    }
                    ComposeOp::Multiply => {
                        for (sv, ev) in s.iter_mut().zip(e) {
                            *sv *= ev;
                        }
                    }
                    ComposeOp::Average => {
                        for (sv, ev) in s.iter_mut().zip(e) {
                            *sv = 0.5 * (*sv + ev);
                        }
                    }
                    ComposeOp::Replace => s.copy_from_slice(e),
                }
            }
            (out, nodes[scores.0].needs_grad)
        };
        Ok(self.push(
            out,
            needs,
            Op::Inject {
                scores,
                map,
                compose,
                head_mask: head_mask.to_vec(),
            },
        ))
    }

    /// Mix per-head score rows with a per-position gate:
    /// `out[t,i] = Σ_h gate[t,h] · scores[h,t,i]`.
    pub fn head_mix(&self, scores: Var, gate: Var) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let (ts, tg) = (&nodes[scores.0].value, &nodes[gate.0].value);
            let [h, k, j] = dims3("head_mix", ts)?;
            if tg.shape() != [k, h] {
                return Err(Error::shape(
                    "head_mix",
                    format!("gate {:?} vs scores [{h},{k},{j}]", tg.shape()),
                ));
            }
            let mut out = Tensor::zeros(vec![k, j]);
            for t in 0..k {
                let orow = &mut out.data_mut()[t * j..(t + 1) * j];
                for hi in 0..h {
                    let w = tg.get2(t, hi);
                    let srow = &ts.data()[(hi * k + t) * j..(hi * k + t + 1) * j];
                    for i in 0..j {
                        orow[i] += w * srow[i];
                    }
                }
            }
            (out, nodes[scores.0].needs_grad || nodes[gate.0].needs_grad)
        };
        Ok(self.push(out, needs, Op::HeadMix { scores, gate }))
    }

    /// Mean over valid rows of `KL(gold_row ‖ softmax(logits_row))`, with the
    /// predicted probability floored at 1e-9 inside the log.  The gradient
    /// treats the floor as inactive (the standard stable form).
    pub fn kl_rows(&self, logits: Var, gold: Tensor, valid: &[bool]) -> Result<Var> {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let [k, j] = dims2("kl_rows", tl)?;
            if gold.shape() != [k, j] || valid.len() != k {
                return Err(Error::shape(
                    "kl_rows",
                    format!(
                        "gold {:?} / valid {} vs logits [{k},{j}]",
                        gold.shape(),
                        valid.len()
                    ),
                ));
            }
            let n_valid = valid.iter().filter(|&&b| b).count();
            if n_valid == 0 {
                return Err(Error::InvalidInput("kl_rows: no valid rows".to_string()));
            }
            let mut total = 0.0;
            let mut q_row = vec![0.0; j];
            for t in 0..k {
                if !valid[t] {
                    continue;
                }
                q_row.copy_from_slice(&tl.data()[t * j..(t + 1) * j]);
                softmax_row(&mut q_row);
                let p = &gold.data()[t * j..(t + 1) * j];
                for i in 0..j {
                    if p[i] > 0.0 {
                        total += p[i] * (p[i].ln() - q_row[i].max(1e-9).ln());
                    }
                }
            }
            (
                Tensor::scalar(total / n_valid as f64),
                nodes[logits.0].needs_grad,
            )
        };
        Ok(self.push(
            out,
            needs,
            Op::KlRows {
                logits,
                gold,
                valid: valid.to_vec(),
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let (out, needs) = {
            let nodes = self.nodes.borrow();
            (
                Tensor::scalar(nodes[x.0].value.iter().sum()),
                nodes[x.0].needs_grad,
            )
        };
        self.push(out, needs, Op::Sum { x })
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from `output`, seeding its gradient with `seed` (which
    /// must match its shape).  Gradients of all reached nodes are retained
    /// and readable via `grad`.  The first op whose backward produces a NaN
    /// aborts the sweep with an error naming it.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<()> {
        self.backward_impl(output, seed, None)
    }

    /// Like `backward`, but elementwise nonlinearities (swish, gelu) use the
    /// secant slope between this tape and `reference` — a tape that must
    /// have been built by the identical op sequence on reference inputs —
    /// instead of their local derivative.  Everything else keeps its
    /// ordinary vector–Jacobian product.
    pub fn backward_rescale(&self, reference: &Tape, output: Var, seed: &Tensor) -> Result<()> {
        {
            let a = self.nodes.borrow();
            let b = reference.nodes.borrow();
            if a.len() != b.len() {
                return Err(Error::InvalidInput(format!(
                    "rescale: tapes differ in length ({} vs {})",
                    a.len(),
                    b.len()
                )));
            }
        }
        self.backward_impl(output, seed, Some(reference))
    }

    fn backward_impl(&self, output: Var, seed: &Tensor, reference: Option<&Tape>) -> Result<()> {
        if seed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward seed".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        if output.0 >= nodes.len() {
            return Err(Error::InvalidInput(
                "backward: output var not on this tape".to_string(),
            ));
        }
        if nodes[output.0].value.shape() != seed.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    nodes[output.0].value.shape()
                ),
            ));
        }
        if !nodes[output.0].needs_grad {
            return Err(Error::InvalidInput(
                "backward: output does not require gradients".to_string(),
            ));
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[output.0].grad = Some(seed.clone());

        let ref_nodes = reference.map(|t| t.nodes.borrow());

        for i in (0..=output.0).rev() {
            // Take this node's grad and op out so the input nodes can be
            // borrowed freely (ops can carry large constant tensors; moving
            // beats cloning).
            let Some(go) = nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            let op_name = op.name();
            let touched = step_backward(&mut nodes, i, &go, &op, ref_nodes.as_deref());
            nodes[i].op = op;
            nodes[i].grad = Some(go);
            for t in touched? {
                if let Some(g) = &nodes[t.0].grad {
                    if g.iter().any(|v| v.is_nan()) {
                        return Err(Error::NanGradient { op: op_name });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Accumulate `delta` into the grad slot of node `v` (allocating zeros on
/// first touch) if that node wants gradients.  Returns whether it was touched.
fn accumulate(nodes: &mut [Node], v: Var, delta: &Tensor) -> bool {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return false;
    }
    match &mut node.grad {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        None => node.grad = Some(delta.clone()),
    }
    true
}

/// Dispatch one node's vector–Jacobian product.  Returns the vars whose
/// grads were written (for NaN screening).
fn step_backward(
    nodes: &mut Vec<Node>,
    idx: usize,
    go: &Tensor,
    op: &Op,
    ref_nodes: Option<&Vec<Node>>,
) -> Result<Vec<Var>> {
    let mut touched = Vec::new();
    let touch = |nodes: &mut Vec<Node>, v: Var, delta: &Tensor, out: &mut Vec<Var>| {
        if accumulate(nodes, v, delta) {
            out.push(v);
        }
    };
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k, n) = {
                let ta = nodes[a.0].value.shape();
                (ta[0], ta[1], nodes[b.0].value.shape()[1])
            };
            if nodes[a.0].needs_grad {
                let mut da = Tensor::zeros(vec![m, k]);
                mm_nt_acc(da.data_mut(), go.data(), nodes[b.0].value.data(), m, n, k);
                touch(nodes, *a, &da, &mut touched);
            }
            if nodes[b.0].needs_grad {
                let mut db = Tensor::zeros(vec![k, n]);
                mm_tn_acc(db.data_mut(), nodes[a.0].value.data(), go.data(), m, k, n);
                touch(nodes, *b, &db, &mut touched);
            }
        }
        Op::MatMulNT { a, b } => {
            // c[m,n] = a[m,k] · b[n,k]ᵀ
            let (m, k, n) = {
                let ta = nodes[a.0].value.shape();
                (ta[0], ta[1], nodes[b.0].value.shape()[0])
            };
            if nodes[a.0].needs_grad {
                let mut da = Tensor::zeros(vec![m, k]);
                mm_nn_acc(da.data_mut(), go.data(), nodes[b.0].value.data(), m, n, k);
                touch(nodes, *a, &da, &mut touched);
            }
            if nodes[b.0].needs_grad {
                let mut db = Tensor::zeros(vec![n, k]);
                mm_tn_acc(db.data_mut(), go.data(), nodes[a.0].value.data(), m, n, k);
                touch(nodes, *b, &db, &mut touched);
            }
        }
        Op::Bmm { a, b } => {
            let (g, m, k, n) = {
                let ta = nodes[a.0].value.shape();
                (ta[0], ta[1], ta[2], nodes[b.0].value.shape()[2])
            };
            if nodes[a.0].needs_grad {
                let mut da = Tensor::zeros(vec![g, m, k]);
                for gi in 0..g {
                    mm_nt_acc(
                        &mut da.data_mut()[gi * m * k..(gi + 1) * m * k],
                        &go.data()[gi * m * n..(gi + 1) * m * n],
                        &nodes[b.0].value.data()[gi * k * n..(gi + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                }
                touch(nodes, *a, &da, &mut touched);
            }
            if nodes[b.0].needs_grad {
                let mut db = Tensor::zeros(vec![g, k, n]);
                for gi in 0..g {
                    mm_tn_acc(
                        &mut db.data_mut()[gi * k * n..(gi + 1) * k * n],
                        &nodes[a.0].value.data()[gi * m * k..(gi + 1) * m * k],
                        &go.data()[gi * m * n..(gi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                touch(nodes, *b, &db, &mut touched);
            }
        }
        Op::BmmNT { a, b } => {
            // c[g,m,n] = a[g,m,k] · b[g,n,k]ᵀ
            let (g, m, k, n) = {
                let ta = nodes[a.0].value.shape();
                (ta[0], ta[1], ta[2], nodes[b.0].value.shape()[1])
            };
            if nodes[a.0].needs_grad {
                let mut da = Tensor::zeros(vec![g, m, k]);
                for gi in 0..g {
                    mm_nn_acc(
                        &mut da.data_mut()[gi * m * k..(gi + 1) * m * k],
                        &go.data()[gi * m * n..(gi + 1) * m * n],
                        &nodes[b.0].value.data()[gi * n * k..(gi + 1) * n * k],
                        m,
                        n,
                        k,
                    );
                }
                touch(nodes, *a, &da, &mut touched);
            }
            if nodes[b.0].needs_grad {
                let mut db = Tensor::zeros(vec![g, n, k]);
                for gi in 0..g {
                    mm_tn_acc(
                        &mut db.data_mut()[gi * n * k..(gi + 1) * n * k],
                        &go.data()[gi * m * n..(gi + 1) * m * n],
                        &nodes[a.0].value.data()[gi * m * k..(gi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                touch(nodes, *b, &db, &mut touched);
            }
        }
        Op::Add { a, b } => {
            touch(nodes, *a, go, &mut touched);
            touch(nodes, *b, go, &mut touched);
        }
        Op::AddRow { a, row } => {
            touch(nodes, *a, go, &mut touched);
            if nodes[row.0].needs_grad {
                let n = nodes[row.0].value.len();
                let mut dr = Tensor::zeros(vec![n]);
                for chunk in go.data().chunks_exact(n) {
                    for (d, g) in dr.data_mut().iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                touch(nodes, *row, &dr, &mut touched);
            }
        }
        Op::Mul { a, b } => {
            if nodes[a.0].needs_grad {
                let da = go.hadamard(&nodes[b.0].value)?;
                touch(nodes, *a, &da, &mut touched);
            }
            if nodes[b.0].needs_grad {
                let db = go.hadamard(&nodes[a.0].value)?;
                touch(nodes, *b, &db, &mut touched);
            }
        }
        Op::Scale { a, c } => {
            let da = go.scale(*c);
            touch(nodes, *a, &da, &mut touched);
        }
        Op::Softmax { x } => {
            // y rows are this node's value; dx = y ∘ (go − ⟨go, y⟩)
            let y = &nodes[idx].value;
            let n = *y.shape().last().unwrap();
            let mut dx = Tensor::zeros(y.shape().to_vec());
            for (ri, (yrow, grow)) in y
                .data()
                .chunks_exact(n)
                .zip(go.data().chunks_exact(n))
                .enumerate()
            {
                let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                let drow = &mut dx.data_mut()[ri * n..(ri + 1) * n];
                for j in 0..n {
                    drow[j] = yrow[j] * (grow[j] - dot);
                }
            }
            touch(nodes, *x, &dx, &mut touched);
        }
        Op::LayerNorm { x, gain, bias } => {
            let tx = nodes[x.0].value.clone();
            let tg = nodes[gain.0].value.clone();
            let n = *tx.shape().last().unwrap();
            let rows = tx.len() / n;
            let mut dx = Tensor::zeros(tx.shape().to_vec());
            let mut dg = Tensor::zeros(vec![n]);
            let mut db = Tensor::zeros(vec![n]);
            for r in 0..rows {
                let xrow = &tx.data()[r * n..(r + 1) * n];
                let grow = &go.data()[r * n..(r + 1) * n];
                let mean = xrow.iter().sum::<f64>() / n as f64;
                let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                // x̂ and the two row means the VJP needs.
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for j in 0..n {
                    xhat[j] = (xrow[j] - mean) * inv;
                    dxhat[j] = grow[j] * tg.data()[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= n as f64;
                mean_dxhat_xhat /= n as f64;
                let dxrow = &mut dx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    dxrow[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    dg.data_mut()[j] += grow[j] * xhat[j];
                    db.data_mut()[j] += grow[j];
                }
            }
            touch(nodes, *x, &dx, &mut touched);
            touch(nodes, *gain, &dg, &mut touched);
            touch(nodes, *bias, &db, &mut touched);
        }
        Op::Swish { x } => {
            let dx = elementwise_backward(nodes, idx, *x, go, ref_nodes, swish_grad);
            touch(nodes, *x, &dx, &mut touched);
        }
        Op::Gelu { x } => {
            let dx = elementwise_backward(nodes, idx, *x, go, ref_nodes, gelu_grad);
            touch(nodes, *x, &dx, &mut touched);
        }
        Op::Embed { table, ids } => {
            if nodes[table.0].needs_grad {
                let shape = nodes[table.0].value.shape().to_vec();
                let d = shape[1];
                let mut dt = Tensor::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &go.data()[r * d..(r + 1) * d];
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (dv, gv) in dst.iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
                touch(nodes, *table, &dt, &mut touched);
            }
        }
        Op::Concat { parts } => {
            let rows = go.shape()[0];
            let total = go.shape()[1];
            let mut col = 0usize;
            for p in parts {
                let c = nodes[p.0].value.shape()[1];
                if nodes[p.0].needs_grad {
                    let mut dp = Tensor::zeros(vec![rows, c]);
                    for r in 0..rows {
                        dp.data_mut()[r * c..(r + 1) * c]
                            .copy_from_slice(&go.data()[r * total + col..r * total + col + c]);
                    }
                    touch(nodes, *p, &dp, &mut touched);
                }
                col += c;
            }
        }
        Op::SplitHeads { x, batch, heads } => {
            if nodes[x.0].needs_grad {
                let shape = nodes[x.0].value.shape().to_vec();
                let len = shape[0] / batch;
                let dk = shape[1] / heads;
                let mut dx = Tensor::zeros(shape);
                // Output grad is in split layout; route it back through the
                // inverse permutation.
                split_to_flat(dx.data_mut(), go.data(), *batch, len, *heads, dk);
                touch(nodes, *x, &dx, &mut touched);
            }
        }
        Op::MergeHeads { x, batch, heads } => {
            if nodes[x.0].needs_grad {
                let shape = nodes[x.0].value.shape().to_vec();
                let len = shape[1];
                let dk = shape[2];
                let mut dx = Tensor::zeros(shape);
                flat_to_split(dx.data_mut(), go.data(), *batch, len, *heads, dk);
                touch(nodes, *x, &dx, &mut touched);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            valid,
        } => {
            if nodes[logits.0].needs_grad {
                let tl = &nodes[logits.0].value;
                let v = tl.shape()[1];
                let n_valid = valid.iter().filter(|&&b| b).count() as f64;
                let scale = go.item() / n_valid;
                let mut dl = Tensor::zeros(tl.shape().to_vec());
                let mut p = vec![0.0; v];
                for (r, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
                    if !ok {
                        continue;
                    }
                    p.copy_from_slice(&tl.data()[r * v..(r + 1) * v]);
                    softmax_row(&mut p);
                    let drow = &mut dl.data_mut()[r * v..(r + 1) * v];
                    for j in 0..v {
                        drow[j] = scale * (p[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                touch(nodes, *logits, &dl, &mut touched);
            }
        }
        Op::PickEntry { x, row, col } => {
            if nodes[x.0].needs_grad {
                let mut dx = Tensor::zeros(nodes[x.0].value.shape().to_vec());
                let c = dx.shape()[1];
                dx.data_mut()[row * c + col] = go.item();
                touch(nodes, *x, &dx, &mut touched);
            }
        }
        Op::Inject {
            scores,
            map,
            compose,
            head_mask,
        } => {
            if nodes[scores.0].needs_grad {
                let shape = nodes[scores.0].value.shape().to_vec();
                let (q, k) = (shape[1], shape[2]);
                let heads = head_mask.len();
                let plane = q * k;
                let mut ds = go.clone();
                for gi in 0..shape[0] {
                    let (bi, hi) = (gi / heads, gi % heads);
                    if !head_mask[hi] {
                        continue; // pass-through head: d/ds = 1
                    }
                    let slice = &mut ds.data_mut()[gi * plane..(gi + 1) * plane];
                    match compose {
                        ComposeOp::Add => {}
                        ComposeOp::Multiply => {
                            let e = &map.data()[bi * plane..(bi + 1) * plane];
                            for (sv, ev) in slice.iter_mut().zip(e) {
                                *sv *= ev;
                            }
                        }
                        ComposeOp::Average => {
                            for sv in slice.iter_mut() {
                                *sv *= 0.5;
                            }
                        }
                        ComposeOp::Replace => slice.fill(0.0),
                    }
                }
                touch(nodes, *scores, &ds, &mut touched);
            }
        }
        Op::HeadMix { scores, gate } => {
            let (h, k, j) = {
                let s = nodes[scores.0].value.shape();
                (s[0], s[1], s[2])
            };
            if nodes[scores.0].needs_grad {
                let tg = nodes[gate.0].value.clone();
                let mut ds = Tensor::zeros(vec![h, k, j]);
                for hi in 0..h {
                    for t in 0..k {
                        let w = tg.get2(t, hi);
                        let drow = &mut ds.data_mut()[(hi * k + t) * j..(hi * k + t + 1) * j];
                        let grow = &go.data()[t * j..(t + 1) * j];
                        for i in 0..j {
                            drow[i] = w * grow[i];
                        }
                    }
                }
                touch(nodes, *scores, &ds, &mut touched);
            }
            if nodes[gate.0].needs_grad {
                let ts = nodes[scores.0].value.clone();
                let mut dg = Tensor::zeros(vec![k, h]);
                for t in 0..k {
                    let grow = &go.data()[t * j..(t + 1) * j];
                    for hi in 0..h {
                        let srow = &ts.data()[(hi * k + t) * j..(hi * k + t + 1) * j];
                        let mut acc = 0.0;
                        for i in 0..j {
                            acc += grow[i] * srow[i];
                        }
                        dg.set2(t, hi, acc);
                    }
                }
                touch(nodes, *gate, &dg, &mut touched);
            }
        }
        Op::KlRows {
            logits,
            gold,
            valid,
        } => {
            if nodes[logits.0].needs_grad {
                let tl = &nodes[logits.0].value;
                let j = tl.shape()[1];
                let n_valid = valid.iter().filter(|&&b| b).count() as f64;
                let scale = go.item() / n_valid;
                let mut dl = Tensor::zeros(tl.shape().to_vec());
                let mut q = vec![0.0; j];
                for (t, &ok) in valid.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    q.copy_from_slice(&tl.data()[t * j..(t + 1) * j]);
                    softmax_row(&mut q);
                    let p = &gold.data()[t * j..(t + 1) * j];
                    let drow = &mut dl.data_mut()[t * j..(t + 1) * j];
                    for i in 0..j {
                        drow[i] = scale * (q[i] - p[i]);
                    }
                }
                touch(nodes, *logits, &dl, &mut touched);
            }
        }
        Op::Sum { x } => {
            if nodes[x.0].needs_grad {
                let dx = Tensor::full(nodes[x.0].value.shape().to_vec(), go.item());
                touch(nodes, *x, &dx, &mut touched);
            }
        }
    }
    Ok(touched)
}

/// Backward for an elementwise nonlinearity.  In a rescale sweep the local
/// derivative is replaced by the secant (Δout/Δin) against the reference
/// tape wherever Δin is non-vanishing.
fn elementwise_backward(
    nodes: &[Node],
    idx: usize,
    x: Var,
    go: &Tensor,
    ref_nodes: Option<&Vec<Node>>,
    fprime: fn(f64) -> f64,
) -> Tensor {
    let tx = &nodes[x.0].value;
    let mut dx = Tensor::zeros(tx.shape().to_vec());
    match ref_nodes {
        None => {
            for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(tx.data()).zip(go.data()) {
                *d = gv * fprime(xv);
            }
        }
        Some(rn) => {
            let rx = &rn[x.0].value;
            let ry = &rn[idx].value;
            let y = &nodes[idx].value;
            for i in 0..tx.len() {
                let din = tx.data()[i] - rx.data()[i];
                let slope = if din.abs() > RESCALE_DELTA_MIN {
                    (y.data()[i] - ry.data()[i]) / din
                } else {
                    fprime(tx.data()[i])
                };
                dx.data_mut()[i] = go.data()[i] * slope;
            }
        }
    }
    dx
}

/// `[b*l, h*dk]` (flat) → `[b*h, l, dk]` (split).
fn flat_to_split(split: &mut [f64], flat: &[f64], b: usize, l: usize, h: usize, dk: usize) {
    let d = h * dk;
    for bi in 0..b {
        for t in 0..l {
            for hi in 0..h {
                let flat_off = (bi * l + t) * d + hi * dk;
                let split_off = ((bi * h + hi) * l + t) * dk;
                split[split_off..split_off + dk].copy_from_slice(&flat[flat_off..flat_off + dk]);
            }
        }
    }
}

/// `[b*h, l, dk]` (split) → `[b*l, h*dk]` (flat).
fn split_to_flat(flat: &mut [f64], split: &[f64], b: usize, l: usize, h: usize, dk: usize) {
    let d = h * dk;
    for bi in 0..b {
        for t in 0..l {
            for hi in 0..h {
                let flat_off = (bi * l + t) * d + hi * dk;
                let split_off = ((bi * h + hi) * l + t) * dk;
                flat[flat_off..flat_off + dk].copy_from_slice(&split[split_off..split_off + dk]);
            }
        }
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape(op, format!("expected 2-D, got {s:?}"))),
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::shape(op, format!("expected 3-D, got {s:?}"))),
    }
}

/// In-place stable softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log p[target] for one logits row, numerically stable.
fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row[target] - lse
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Tanh-form gelu (the common transformer variant).
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_t(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let mut mask = Tensor::zeros(vec![2, 3]);
        mask.set2(0, 2, MASK_NEG);
        let y = tape.softmax(x, Some(mask)).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(v.get2(0, 2) < 1e-12, "masked entry got weight {}", v.get2(0, 2));
        // Unmasked row is the plain softmax of [1,2,3]... row 1 is uniform.
        for j in 0..3 {
            assert!((v.get2(1, j) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let tape = Tape::new();
        let mut rng = Rng::new(4);
        let x = tape.leaf(rand_t(vec![5, 8], &mut rng));
        let g = tape.leaf(Tensor::full(vec![8], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![8]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y);
        for r in 0..5 {
            let row = v.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn embed_gathers_rows_and_scatters_grads() {
        let tape = Tape::new();
        let table = tape.leaf(
            Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let e = tape.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(e);
        tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(tape.embed(table, &[3]).is_err());
    }

    #[test]
    fn concat_stitches_columns_and_splits_grads() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(c);
        tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.grad(a).unwrap().shape(), &[2, 1]);
        assert_eq!(tape.grad(b).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let mut rng = Rng::new(8);
        let tape = Tape::new();
        let x = tape.leaf(rand_t(vec![2 * 3, 4 * 2], &mut rng)); // b=2 l=3 h=4 dk=2
        let s = tape.split_heads(x, 2, 4).unwrap();
        assert_eq!(tape.shape_of(s), vec![8, 3, 2]);
        let m = tape.merge_heads(s, 2, 4).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let tape = Tape::new();
        // Two rows; second is masked out. Row 0: uniform logits over 4 ⇒ −ln(1/4).
        let logits = tape.leaf(Tensor::zeros(vec![2, 4]));
        let ce = tape
            .cross_entropy(logits, &[1, 0], &[true, false])
            .unwrap();
        assert!((tape.value(ce).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_masked_is_an_error() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 4]));
        assert!(tape.cross_entropy(logits, &[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn inject_ops_match_hand_results() {
        // One example, two heads, 1×2 scores; inject only on head 0.
        let map = Tensor::from_vec(vec![1, 1, 2], vec![10.0, 20.0]).unwrap();
        let scores_data = vec![1.0, 2.0, 3.0, 4.0]; // head0: [1,2]; head1: [3,4]
        let cases = [
            (ComposeOp::Add, vec![11.0, 22.0, 3.0, 4.0]),
            (ComposeOp::Multiply, vec![10.0, 40.0, 3.0, 4.0]),
            (ComposeOp::Average, vec![5.5, 11.0, 3.0, 4.0]),
            (ComposeOp::Replace, vec![10.0, 20.0, 3.0, 4.0]),
        ];
        for (op, want) in cases {
            let tape = Tape::new();
            let s = tape.leaf(Tensor::from_vec(vec![2, 1, 2], scores_data.clone()).unwrap());
            let out = tape.inject(s, map.clone(), op, &[true, false]).unwrap();
            assert_eq!(tape.value(out).data(), &want[..], "{op:?}");
        }
    }

    #[test]
    fn replace_blocks_gradient_on_masked_heads_only() {
        let map = Tensor::from_vec(vec![1, 1, 2], vec![10.0, 20.0]).unwrap();
        let tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape
            .inject(s, map, ComposeOp::Replace, &[true, false])
            .unwrap();
        let total = tape.sum(out);
        tape.backward(total, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn head_mix_matches_hand_value() {
        let tape = Tape::new();
        // h=2, k=1, j=2
        let s = tape.leaf(Tensor::from_vec(vec![2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
        let g = tape.leaf(Tensor::from_vec(vec![1, 2], vec![0.25, 0.75]).unwrap());
        let out = tape.head_mix(s, g).unwrap();
        let v = tape.value(out);
        assert!((v.get2(0, 0) - (0.25 + 7.5)).abs() < 1e-12);
        assert!((v.get2(0, 1) - (0.5 + 15.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_rows_zero_when_prediction_matches_gold() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        let gold = Tensor::full(vec![2, 3], 1.0 / 3.0);
        let kl = tape.kl_rows(logits, gold, &[true, true]).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn kl_rows_known_value() {
        // p = [1,0] vs q = softmax([0,0]) = [1/2,1/2]: KL = ln 2.
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2]));
        let gold = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let kl = tape.kl_rows(logits, gold, &[true]).unwrap();
        assert!((tape.value(kl).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_errors_on_nan_naming_the_op() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        let err = tape.backward(s, &Tensor::scalar(1.0)).unwrap_err();
        match err {
            Error::NanGradient { op } => assert_eq!(op, "mul"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn backward_rejects_mismatched_seed_shape() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2]));
        let s = tape.sum(a);
        assert!(tape.backward(s, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn grads_accumulate_across_fan_out() {
        // y = x·x (as mul of the same var): dy/dx = 2x.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut rng = Rng::new(99);
            let tape = Tape::new();
            let x = tape.leaf(rand_t(vec![4, 6], &mut rng));
            let w = tape.leaf(rand_t(vec![6, 6], &mut rng));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.swish(h);
            let g = tape.leaf(Tensor::full(vec![6], 1.0));
            let b = tape.leaf(Tensor::zeros(vec![6]));
            let h = tape.layer_norm(h, g, b).unwrap();
            let y = tape.softmax(h, None).unwrap();
            let s = tape.sum(y);
            tape.backward(s, &Tensor::scalar(1.0)).unwrap();
            (tape.value(y), tape.grad(x).unwrap())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.data(), v2.data());
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full(vec![2], 3.0));
        let c = tape.constant(Tensor::full(vec![2], 2.0));
        let m = tape.mul(a, c).unwrap();
        let s = tape.sum(m);
        tape.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn rescale_secant_replaces_local_slope() {
        // One swish node; x = 2 vs reference 0: multiplier must be
        // (swish(2) − swish(0)) / 2, not swish'(2).
        let actual = Tape::new();
        let x = actual.leaf(Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        let y = actual.swish(x);
        let s = actual.sum(y);

        let reference = Tape::new();
        let xr = reference.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let yr = reference.swish(xr);
        let _sr = reference.sum(yr);

        actual
            .backward_rescale(&reference, s, &Tensor::scalar(1.0))
            .unwrap();
        let got = actual.grad(x).unwrap().data()[0];
        let want = (swish(2.0) - swish(0.0)) / 2.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn rescale_falls_back_to_local_slope_on_tiny_delta() {
        let actual = Tape::new();
        let x = actual.leaf(Tensor::from_vec(vec![1], vec![1.5]).unwrap());
        let y = actual.gelu(x);
        let s = actual.sum(y);

        let reference = Tape::new();
        let xr = reference.leaf(Tensor::from_vec(vec![1], vec![1.5 + 1e-12]).unwrap());
        let yr = reference.gelu(xr);
        let _sr = reference.sum(yr);

        actual
            .backward_rescale(&reference, s, &Tensor::scalar(1.0))
            .unwrap();
        let got = actual.grad(x).unwrap().data()[0];
        assert!((got - gelu_grad(1.5)).abs() < 1e-12);
    }
}
