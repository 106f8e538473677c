//! Translation quality and map-comparison metrics.
//!
//! Translation: corpus BLEU (4-gram, add-one smoothing on orders ≥ 2,
//! brevity penalty) and corpus chrF (character n-grams up to 6, β = 2,
//! whitespace ignored, micro-averaged statistics).
//!
//! Map comparison, all over `[j, k]` matrices (source position × target
//! step): per-column entropy, top-k overlap, top-k Kendall τ (tie-corrected)
//! against a reference map, row-wise KL divergence, and flattened
//! Pearson/Spearman correlation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor used before logarithms in KL computations.
pub const KL_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// Corpus BLEU in percent.  4-gram, corpus-level modified precisions with
/// add-one smoothing on orders 2–4, exponential brevity penalty.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_parallel(hyps.len(), refs.len())?;
    let mut log_p = 0.0;
    for n in 1..=4usize {
        let mut num = 0usize;
        let mut den = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                num += c.min(*rc.get(gram).unwrap_or(&0));
            }
            den += hc.values().sum::<usize>();
        }
        let (mut num, mut den) = (num, den);
        if n >= 2 {
            num += 1;
            den += 1;
        }
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_p += 0.25 * ((num as f64 / den as f64).ln());
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// chrF
// ---------------------------------------------------------------------------

/// Corpus chrF in percent: character n-grams of order 1–6 on the
/// whitespace-stripped text, micro-averaged precision/recall per order,
/// F-scores (β = 2, recall-weighted) averaged over the orders for which
/// either side has any n-grams at all (so very short segments are not
/// punished for orders that cannot exist).
pub fn corpus_chrf(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_parallel(hyps.len(), refs.len())?;
    const MAX_N: usize = 6;
    const BETA2: f64 = 4.0;
    let joined = |words: &Vec<String>| -> Vec<char> { words.concat().chars().collect() };
    let hyp_chars: Vec<Vec<char>> = hyps.iter().map(joined).collect();
    let ref_chars: Vec<Vec<char>> = refs.iter().map(joined).collect();
    let mut total_f = 0.0;
    let mut orders = 0usize;
    for n in 1..=MAX_N {
        let mut matched = 0usize;
        let mut hyp_total = 0usize;
        let mut ref_total = 0usize;
        for (h, r) in hyp_chars.iter().zip(&ref_chars) {
            let hc = char_ngram_counts(h, n);
            let rc = char_ngram_counts(r, n);
            for (gram, &c) in &hc {
                matched += c.min(*rc.get(gram).unwrap_or(&0));
            }
            hyp_total += hc.values().sum::<usize>();
            ref_total += rc.values().sum::<usize>();
        }
        if hyp_total == 0 && ref_total == 0 {
            continue;
        }
        orders += 1;
        let p = if hyp_total > 0 {
            matched as f64 / hyp_total as f64
        } else {
            0.0
        };
        let r = if ref_total > 0 {
            matched as f64 / ref_total as f64
        } else {
            0.0
        };
        if p + r > 0.0 {
            total_f += (1.0 + BETA2) * p * r / (BETA2 * p + r);
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * total_f / orders as f64)
}

fn char_ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for i in 0..=chars.len() - n {
            *m.entry(&chars[i..i + n]).or_insert(0) += 1;
        }
    }
    m
}

fn check_parallel(h: usize, r: usize) -> Result<()> {
    if h == 0 {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    if h != r {
        return Err(Error::InvalidInput(format!(
            "{h} hypotheses vs {r} references"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Map statistics
// ---------------------------------------------------------------------------

/// Mean Shannon entropy (nats) of the columns of a non-negative `[j, k]`
/// map, each column read as an unnormalised distribution over source
/// positions.  An all-zero column counts as uniform (entropy `ln j`).
pub fn column_entropy(map: &Tensor) -> Result<f64> {
    let [j, k] = dims2(map)?;
    let mut total = 0.0;
    for c in 0..k {
        let mut sum = 0.0;
        for r in 0..j {
            let v = map.get2(r, c);
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "entropy needs non-negative finite entries, got {v} at ({r}, {c})"
                )));
            }
            sum += v;
        }
        if sum <= 0.0 {
            total += (j as f64).ln();
            continue;
        }
        let mut h = 0.0;
        for r in 0..j {
            let p = map.get2(r, c) / sum;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    Ok(total / k as f64)
}

/// Indices of the `k` largest entries of `column`, ties resolved toward the
/// lower index.  `k` is clamped to the column length.
fn top_k_indices(column: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..column.len()).collect();
    order.sort_by(|&a, &b| {
        column[b]
            .partial_cmp(&column[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(column.len()));
    order
}

/// Mean per-column overlap between the top-k source sets of `map` and
/// `reference` (both `[j, k]`); each column contributes
/// `|top ∩ topʳᵉᶠ| / min(k, j)`.
pub fn overlap_at_k(map: &Tensor, reference: &Tensor, k: usize) -> Result<f64> {
    let [j, cols] = same_dims(map, reference)?;
    if k == 0 {
        return Err(Error::InvalidInput("overlap needs k ≥ 1".into()));
    }
    let kk = k.min(j);
    let mut total = 0.0;
    for c in 0..cols {
        let mcol: Vec<f64> = (0..j).map(|r| map.get2(r, c)).collect();
        let rcol: Vec<f64> = (0..j).map(|r| reference.get2(r, c)).collect();
        let a = top_k_indices(&mcol, kk);
        let b = top_k_indices(&rcol, kk);
        let inter = a.iter().filter(|i| b.contains(i)).count();
        total += inter as f64 / kk as f64;
    }
    Ok(total / cols as f64)
}

/// Mean per-column Kendall τ (tie-corrected) between `map` and `reference`
/// scores, restricted to the reference's top-k source positions of each
/// column.  Columns where either side is entirely tied contribute 0.
pub fn kendall_tau_at_k(map: &Tensor, reference: &Tensor, k: usize) -> Result<f64> {
    let [j, cols] = same_dims(map, reference)?;
    if k == 0 {
        return Err(Error::InvalidInput("τ needs k ≥ 1".into()));
    }
    let kk = k.min(j);
    let mut total = 0.0;
    for c in 0..cols {
        let rcol: Vec<f64> = (0..j).map(|r| reference.get2(r, c)).collect();
        let keep = top_k_indices(&rcol, kk);
        let xs: Vec<f64> = keep.iter().map(|&r| map.get2(r, c)).collect();
        let ys: Vec<f64> = keep.iter().map(|&r| rcol[r]).collect();
        total += kendall_tau_b(&xs, &ys);
    }
    Ok(total / cols as f64)
}

/// Kendall τ-b of two equal-length score lists; 0 when either list is
/// entirely tied (the coefficient is undefined there).
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len();
    if m < 2 {
        return 0.0;
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for a in 0..m {
        for b in a + 1..m {
            let dx = xs[a] - xs[b];
            let dy = ys[a] - ys[b];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (m * (m - 1) / 2) as i64;
    let denom = ((n0 - ties_x) as f64) * ((n0 - ties_y) as f64);
    if denom <= 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom.sqrt()
}

/// Mean row-wise KL divergence `KL(p_row ‖ q_row)` between two equally
/// shaped matrices of row distributions, entries floored at [`KL_EPS`].
pub fn mean_row_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape(
            "kl",
            format!("{:?} vs {:?}", p.shape(), q.shape()),
        ));
    }
    let [rows, n] = dims2(p)?;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..n {
            let pv = p.get2(r, c).max(KL_EPS);
            let qv = q.get2(r, c).max(KL_EPS);
            total += pv * (pv / qv).ln();
        }
    }
    Ok(total / rows as f64)
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "correlation over {} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidInput("correlation needs ≥ 2 values".into()));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let (dx, dy) = (xs[i] - mx, ys[i] - my);
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman correlation: Pearson over average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Average (fractional) ranks, 1-based; equal values share the mean of the
/// ranks they span.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        xs[a]
            .partial_cmp(&xs[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut jx = i;
        while jx + 1 < n && xs[order[jx + 1]] == xs[order[i]] {
            jx += 1;
        }
        // Positions i..=jx hold equal values; share the mean rank.
        let mean = (i + jx) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=jx] {
            ranks[idx] = mean;
        }
        i = jx + 1;
    }
    ranks
}

/// Flattened Pearson correlation between two equally shaped maps.
pub fn map_pearson(map: &Tensor, reference: &Tensor) -> Result<f64> {
    same_dims(map, reference)?;
    pearson(map.data(), reference.data())
}

/// Flattened Spearman correlation between two equally shaped maps.
pub fn map_spearman(map: &Tensor, reference: &Tensor) -> Result<f64> {
    same_dims(map, reference)?;
    spearman(map.data(), reference.data())
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape("metric", format!("expected 2-d, got {s:?}"))),
    }
}

fn same_dims(a: &Tensor, b: &Tensor) -> Result<[usize; 2]> {
    let d = dims2(a)?;
    if b.shape() != a.shape() {
        return Err(Error::shape(
            "metric",
            format!("map {:?} vs reference {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(d)
}
