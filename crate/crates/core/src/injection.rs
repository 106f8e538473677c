//! Conditioning of attribution maps for composition into attention scores.
//!
//! Attribution maps arrive as `[j, k]` matrices — source position × target
//! step, raw method output.  Before they touch a model they are:
//!
//! 1. **normalised** column-wise to `[0, 1]` (each target step's scores over
//!    the source are min-max scaled; a constant column becomes all zeros),
//! 2. **oriented** for the target site — cross-attention queries are target
//!    steps, so the map is transposed to `[k, j]`; encoder self-attention
//!    keeps `[j, k]` with the target axis standing in for key positions,
//! 3. **embedded** in the top-left of a fixed `[l, l]` square (zeros
//!    elsewhere) so heterogeneous lengths batch cleanly; consumers slice the
//!    live block back out per batch.
//!
//! Zeros outside the block are conservative: masked and padded positions
//! never receive mass from the map (and under multiplicative composition a
//! zero actively suppresses — callers choose lengths so the block covers
//! every unmasked score).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::Site;

/// Min-max scale every column (target step) of a `[j, k]` map to `[0, 1]`.
/// Columns with no spread become all zeros.
pub fn normalize_columns(map: &Tensor) -> Result<Tensor> {
    let [j, k] = dims2(map)?;
    let mut out = Tensor::zeros(vec![j, k]);
    for c in 0..k {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in 0..j {
            let v = map.get2(r, c);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "attribution map entry ({r}, {c})"
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range > 0.0 {
            for r in 0..j {
                out.set2(r, c, (map.get2(r, c) - lo) / range);
            }
        }
    }
    Ok(out)
}

/// Orient a (normalised) `[j, k]` map for `site` and embed it in the
/// top-left of an `[l, l]` square of zeros.
pub fn orient_and_pad(map: &Tensor, site: Site, l: usize) -> Result<Tensor> {
    let [j, k] = dims2(map)?;
    let (rows, cols) = match site {
        // Cross-attention scores are [target step, source position].
        Site::Cross => (k, j),
        // Encoder self-attention scores are [source, source]; the map's
        // target axis is laid along the key axis unchanged.
        Site::EncoderSelf => (j, k),
    };
    if rows > l || cols > l {
        return Err(Error::InvalidInput(format!(
            "oriented map {rows}×{cols} does not fit in a {l}×{l} square"
        )));
    }
    let mut out = Tensor::zeros(vec![l, l]);
    for r in 0..rows {
        for c in 0..cols {
            let v = match site {
                Site::Cross => map.get2(c, r),
                Site::EncoderSelf => map.get2(r, c),
            };
            out.data_mut()[r * l + c] = v;
        }
    }
    Ok(out)
}

/// Normalise, orient and pad in one step: the full conditioning chain from
/// a raw `[j, k]` attribution map to an injectable `[l, l]` square.
pub fn prepare_square(map: &Tensor, site: Site, l: usize) -> Result<Tensor> {
    orient_and_pad(&normalize_columns(map)?, site, l)
}

/// Every head receives the map.
pub fn full_head_mask(heads: usize) -> Vec<bool> {
    vec![true; heads]
}

/// Alternating halves: heads 0, 2, 4, … receive the map, the rest keep
/// their native scores.
pub fn alternating_head_mask(heads: usize) -> Vec<bool> {
    (0..heads).map(|h| h % 2 == 0).collect()
}

/// Identity-matrix map over `l` positions (ones on the diagonal).
pub fn diagonal_square(l: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![l, l]);
    for i in 0..l {
        t.data_mut()[i * l + i] = 1.0;
    }
    t
}

/// Uniform noise in `[0, 1)` — the structure-free control map.
pub fn random_square(rng: &mut crate::rng::Rng, l: usize) -> Tensor {
    Tensor::from_fn(vec![l, l], |_| rng.uniform())
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [a, b] => Ok([*a, *b]),
        s => Err(Error::shape("map", format!("expected 2-d map, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{ComposeOp, Tape};

    #[test]
    fn normalization_hand_example() {
        // Column 0: [2, 0, 1] → [1, 0, 0.5]; column 1 constant → zeros.
        let m = Tensor::from_vec(vec![3, 2], vec![2.0, 5.0, 0.0, 5.0, 1.0, 5.0]).unwrap();
        let n = normalize_columns(&m).unwrap();
        assert_eq!(n.data(), &[1.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn normalization_rejects_non_finite() {
        let m = Tensor::from_vec(vec![2, 1], vec![1.0, f64::NAN]).unwrap();
        assert!(normalize_columns(&m).is_err());
    }

    #[test]
    fn cross_orientation_transposes_and_pads() {
        // 3 source × 2 target map.
        let m = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sq = orient_and_pad(&m, Site::Cross, 4).unwrap();
        assert_eq!(sq.shape(), [4, 4]);
        // Row = target step, col = source position: sq[t][s] = m[s][t].
        assert_eq!(sq.get2(0, 0), 1.0);
        assert_eq!(sq.get2(0, 1), 3.0);
        assert_eq!(sq.get2(0, 2), 5.0);
        assert_eq!(sq.get2(1, 0), 2.0);
        assert_eq!(sq.get2(1, 2), 6.0);
        // Padding stays zero.
        assert_eq!(sq.get2(2, 0), 0.0);
        assert_eq!(sq.get2(0, 3), 0.0);
    }

    #[test]
    fn encoder_orientation_keeps_layout() {
        let m = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let sq = orient_and_pad(&m, Site::EncoderSelf, 3).unwrap();
        assert_eq!(sq.get2(0, 0), 1.0);
        assert_eq!(sq.get2(0, 2), 3.0);
        assert_eq!(sq.get2(1, 1), 5.0);
        assert_eq!(sq.get2(2, 2), 0.0);
    }

    #[test]
    fn oversized_map_is_rejected() {
        let m = Tensor::zeros(vec![5, 2]);
        assert!(orient_and_pad(&m, Site::EncoderSelf, 4).is_err());
        assert!(orient_and_pad(&m, Site::Cross, 4).is_err());
    }

    #[test]
    fn head_masks_have_documented_shapes() {
        assert_eq!(full_head_mask(4), vec![true; 4]);
        assert_eq!(
            alternating_head_mask(8),
            vec![true, false, true, false, true, false, true, false]
        );
        assert_eq!(alternating_head_mask(8).iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn diagonal_and_random_squares() {
        let d = diagonal_square(3);
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut rng = crate::rng::Rng::new(1);
        let r = random_square(&mut rng, 4);
        assert!(r.data().iter().all(|&v| (0.0..1.0).contains(&v)));
        let r2 = random_square(&mut crate::rng::Rng::new(1), 4);
        assert_eq!(r.data(), r2.data());
    }

    // -- composition laws at the score level --------------------------------

    fn compose_scores(scores: &Tensor, map: &Tensor, op: ComposeOp) -> Tensor {
        let tape = Tape::new();
        let s = tape.constant(scores.clone());
        let out = tape
            .inject(s, map.clone(), op, &[true])
            .expect("inject");
        tape.value(out)
    }

    #[test]
    fn additive_zero_and_multiplicative_one_are_identities() {
        let scores =
            Tensor::from_vec(vec![1, 2, 3], vec![0.3, -1.0, 2.0, 0.0, 4.5, -0.2]).unwrap();
        let zeros = Tensor::zeros(vec![1, 2, 3]);
        let ones = Tensor::full(vec![1, 2, 3], 1.0);
        assert_eq!(
            compose_scores(&scores, &zeros, ComposeOp::Add).data(),
            scores.data()
        );
        assert_eq!(
            compose_scores(&scores, &ones, ComposeOp::Multiply).data(),
            scores.data()
        );
    }

    #[test]
    fn averaging_scores_with_themselves_is_identity_and_replace_discards() {
        let scores =
            Tensor::from_vec(vec![1, 2, 2], vec![0.3, -1.0, 2.0, 0.7]).unwrap();
        let avg = compose_scores(&scores, &scores, ComposeOp::Average);
        assert_eq!(avg.data(), scores.data());
        let map = Tensor::from_vec(vec![1, 2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let rep = compose_scores(&scores, &map, ComposeOp::Replace);
        assert_eq!(rep.data(), map.data());
    }

    // -- property tests ------------------------------------------------------

    use proptest::prelude::*;

    fn arb_map(max_side: usize) -> impl Strategy<Value = Tensor> {
        (1..=max_side, 1..=max_side).prop_flat_map(|(j, k)| {
            proptest::collection::vec(-50.0f64..50.0, j * k)
                .prop_map(move |data| Tensor::from_vec(vec![j, k], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn normalized_values_lie_in_unit_interval(m in arb_map(6)) {
            let n = normalize_columns(&m).unwrap();
            prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn normalization_is_idempotent(m in arb_map(6)) {
            let once = normalize_columns(&m).unwrap();
            let twice = normalize_columns(&once).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }

        #[test]
        fn spread_columns_attain_both_extremes(m in arb_map(6)) {
            let [j, k] = [m.shape()[0], m.shape()[1]];
            let n = normalize_columns(&m).unwrap();
            for c in 0..k {
                let col: Vec<f64> = (0..j).map(|r| m.get2(r, c)).collect();
                let spread = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    > col.iter().cloned().fold(f64::INFINITY, f64::min);
                let ncol: Vec<f64> = (0..j).map(|r| n.get2(r, c)).collect();
                if spread {
                    prop_assert!(ncol.iter().any(|&v| v == 0.0));
                    prop_assert!(ncol.iter().any(|&v| v == 1.0));
                } else {
                    prop_assert!(ncol.iter().all(|&v| v == 0.0));
                }
            }
        }

        #[test]
        fn oriented_square_holds_exactly_the_map_mass(m in arb_map(6)) {
            let l = 8;
            let sq = orient_and_pad(&m, Site::Cross, l).unwrap();
            let want: f64 = m.data().iter().sum();
            let got: f64 = sq.data().iter().sum();
            prop_assert!((want - got).abs() < 1e-9);
            let sq2 = orient_and_pad(&m, Site::EncoderSelf, l).unwrap();
            let got2: f64 = sq2.data().iter().sum();
            prop_assert!((want - got2).abs() < 1e-9);
        }
    }
}
