//! Central finite-difference checking of analytic gradients.
//!
//! This is the independent oracle the autodiff tape is validated against:
//! a gradient claim is only trusted once the secant of the actual scalar
//! function agrees with it coordinate by coordinate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare an analytic gradient against central finite differences of `f`
/// at `point`.  Returns the maximum over coordinates of
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` must be deterministic; any non-finite value it produces is an error.
pub fn finite_difference_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    point: &Tensor,
    analytic: &Tensor,
    epsilon: f64,
) -> Result<f64> {
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "finite_difference_check",
            format!(
                "gradient {:?} vs point {:?}",
                analytic.shape(),
                point.shape()
            ),
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::{ComposeOp, Tape, Var};

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand_t(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    /// Run `build` (leaf → scalar-valued var) at `point`, returning the value
    /// and the tape gradient of the leaf.
    fn eval(build: &dyn Fn(&Tape, Var) -> Result<Var>, point: &Tensor) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        let out = build(&tape, leaf)?;
        let value = tape.value(out).item();
        tape.backward(out, &Tensor::scalar(1.0))?;
        Ok((value, tape.grad(leaf).unwrap()))
    }

    /// Assert the tape gradient of `build` at `point` passes the FD oracle.
    fn assert_grad_ok(name: &str, build: &dyn Fn(&Tape, Var) -> Result<Var>, point: &Tensor) {
        let (_, analytic) = eval(build, point).unwrap();
        let err = finite_difference_check(
            |p| eval(build, p).map(|(v, _)| v),
            point,
            &analytic,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name}: max rel error {err}");
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = Rng::new(21);
        let w = rand_t(vec![5, 4], &mut rng);
        let point = rand_t(vec![3, 5], &mut rng);
        assert_grad_ok(
            "matmul",
            &move |tape, x| {
                let wv = tape.constant(w.clone());
                let h = tape.matmul(x, wv)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn matmul_second_argument_gradient() {
        let mut rng = Rng::new(22);
        let a = rand_t(vec![3, 5], &mut rng);
        let point = rand_t(vec![5, 4], &mut rng);
        assert_grad_ok(
            "matmul rhs",
            &move |tape, w| {
                let av = tape.constant(a.clone());
                let h = tape.matmul(av, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn matmul_nt_gradients_both_sides() {
        let mut rng = Rng::new(23);
        let b = rand_t(vec![6, 4], &mut rng);
        let point = rand_t(vec![3, 4], &mut rng);
        assert_grad_ok(
            "matmul_nt lhs",
            &move |tape, x| {
                let bv = tape.constant(b.clone());
                let h = tape.matmul_nt(x, bv)?;
                Ok(tape.sum(h))
            },
            &point,
        );
        let mut rng = Rng::new(24);
        let a = rand_t(vec![3, 4], &mut rng);
        let point = rand_t(vec![6, 4], &mut rng);
        assert_grad_ok(
            "matmul_nt rhs",
            &move |tape, x| {
                let av = tape.constant(a.clone());
                let h = tape.matmul_nt(av, x)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn batched_matmul_gradients() {
        let mut rng = Rng::new(25);
        let b = rand_t(vec![2, 4, 3], &mut rng);
        let point = rand_t(vec![2, 5, 4], &mut rng);
        assert_grad_ok(
            "bmm",
            &move |tape, x| {
                let bv = tape.constant(b.clone());
                let h = tape.bmm(x, bv)?;
                Ok(tape.sum(h))
            },
            &point,
        );
        let mut rng = Rng::new(26);
        let a = rand_t(vec![2, 5, 4], &mut rng);
        let point = rand_t(vec![2, 6, 4], &mut rng);
        assert_grad_ok(
            "bmm_nt rhs",
            &move |tape, x| {
                let av = tape.constant(a.clone());
                let h = tape.bmm_nt(av, x)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn add_row_broadcast_gradient() {
        let mut rng = Rng::new(27);
        let a = rand_t(vec![4, 6], &mut rng);
        let point = rand_t(vec![6], &mut rng);
        assert_grad_ok(
            "add_row (row)",
            &move |tape, row| {
                let av = tape.constant(a.clone());
                let h = tape.add_row(av, row)?;
                let h = tape.swish(h); // mix so the gradient is not constant
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn elementwise_mul_gradient() {
        let mut rng = Rng::new(28);
        let b = rand_t(vec![3, 3], &mut rng);
        let point = rand_t(vec![3, 3], &mut rng);
        assert_grad_ok(
            "mul",
            &move |tape, x| {
                let bv = tape.constant(b.clone());
                let h = tape.mul(x, bv)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn softmax_gradient_with_mask() {
        let mut rng = Rng::new(29);
        let mut mask = Tensor::zeros(vec![3, 5]);
        mask.set2(0, 4, crate::tape::MASK_NEG);
        mask.set2(2, 0, crate::tape::MASK_NEG);
        let weights = rand_t(vec![3, 5], &mut rng);
        let point = rand_t(vec![3, 5], &mut rng);
        assert_grad_ok(
            "softmax",
            &move |tape, x| {
                let y = tape.softmax(x, Some(mask.clone()))?;
                // Weighted sum so each output entry matters differently.
                let w = tape.constant(weights.clone());
                let h = tape.mul(y, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn layer_norm_gradients_all_inputs() {
        let mut rng = Rng::new(30);
        let gain = rand_t(vec![6], &mut rng);
        let bias = rand_t(vec![6], &mut rng);
        let point = rand_t(vec![4, 6], &mut rng);
        let weights = rand_t(vec![4, 6], &mut rng);
        let w2 = weights.clone();
        assert_grad_ok(
            "layer_norm (x)",
            &move |tape, x| {
                let g = tape.constant(gain.clone());
                let b = tape.constant(bias.clone());
                let y = tape.layer_norm(x, g, b)?;
                let w = tape.constant(w2.clone());
                let h = tape.mul(y, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );

        let mut rng = Rng::new(31);
        let x = rand_t(vec![4, 6], &mut rng);
        let bias = rand_t(vec![6], &mut rng);
        let point = rand_t(vec![6], &mut rng);
        let w3 = weights.clone();
        assert_grad_ok(
            "layer_norm (gain)",
            &move |tape, g| {
                let xv = tape.constant(x.clone());
                let b = tape.constant(bias.clone());
                let y = tape.layer_norm(xv, g, b)?;
                let w = tape.constant(w3.clone());
                let h = tape.mul(y, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );

        let mut rng = Rng::new(32);
        let x = rand_t(vec![4, 6], &mut rng);
        let gain = rand_t(vec![6], &mut rng);
        let point = rand_t(vec![6], &mut rng);
        assert_grad_ok(
            "layer_norm (bias)",
            &move |tape, b| {
                let xv = tape.constant(x.clone());
                let g = tape.constant(gain.clone());
                let y = tape.layer_norm(xv, g, b)?;
                let w = tape.constant(weights.clone());
                let h = tape.mul(y, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn swish_and_gelu_gradients() {
        let mut rng = Rng::new(33);
        let point = rand_t(vec![2, 7], &mut rng).scale(2.0);
        assert_grad_ok(
            "swish",
            &|tape, x| {
                let y = tape.swish(x);
                Ok(tape.sum(y))
            },
            &point,
        );
        assert_grad_ok(
            "gelu",
            &|tape, x| {
                let y = tape.gelu(x);
                Ok(tape.sum(y))
            },
            &point,
        );
    }

    #[test]
    fn embedding_table_gradient_with_repeats() {
        let mut rng = Rng::new(34);
        let point = rand_t(vec![5, 3], &mut rng);
        let weights = rand_t(vec![4, 3], &mut rng);
        assert_grad_ok(
            "embed",
            &move |tape, table| {
                let e = tape.embed(table, &[1, 4, 1, 0])?;
                let w = tape.constant(weights.clone());
                let h = tape.mul(e, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn concat_gradient() {
        let mut rng = Rng::new(35);
        let other = rand_t(vec![3, 2], &mut rng);
        let point = rand_t(vec![3, 4], &mut rng);
        let weights = rand_t(vec![3, 6], &mut rng);
        assert_grad_ok(
            "concat",
            &move |tape, x| {
                let o = tape.constant(other.clone());
                let c = tape.concat(&[x, o])?;
                let w = tape.constant(weights.clone());
                let h = tape.mul(c, w)?;
                Ok(tape.sum(h))
            },
            &point,
        );
    }

    #[test]
    fn cross_entropy_gradient_with_padding() {
        let mut rng = Rng::new(36);
        let point = rand_t(vec![4, 6], &mut rng);
        assert_grad_ok(
            "cross_entropy",
            &|tape, logits| tape.cross_entropy(logits, &[2, 0, 5, 1], &[true, true, false, true]),
            &point,
        );
    }

    #[test]
    fn pick_entry_gradient() {
        let mut rng = Rng::new(37);
        let point = rand_t(vec![3, 4], &mut rng);
        assert_grad_ok(
            "pick_entry",
            &|tape, x| {
                let y = tape.swish(x);
                tape.pick_entry(y, 1, 2)
            },
            &point,
        );
    }

    #[test]
    fn inject_gradients_for_every_compose_op() {
        let mut rng = Rng::new(38);
        let map = rand_t(vec![1, 2, 3], &mut rng);
        let weights = rand_t(vec![2 * 2 * 3], &mut rng);
        let point = rand_t(vec![2, 2, 3], &mut rng); // 1 example × 2 heads
        for op in ComposeOp::all() {
            let map = map.clone();
            let weights = weights.clone();
            assert_grad_ok(
                &format!("inject {:?}", op),
                &move |tape, scores| {
                    let inj = tape.inject(scores, map.clone(), op, &[true, false])?;
                    // Flattened weighted sum through a nonlinearity.
                    let w = tape.constant(
                        Tensor::from_vec(vec![2, 2, 3], weights.data().to_vec()).unwrap(),
                    );
                    let h = tape.mul(inj, w)?;
                    let h = tape.sum(h);
                    Ok(h)
                },
                &point,
            );
        }
    }

    #[test]
    fn head_mix_gradients_both_inputs() {
        let mut rng = Rng::new(39);
        let gate = rand_t(vec![3, 2], &mut rng);
        let point = rand_t(vec![2, 3, 4], &mut rng);
        assert_grad_ok(
            "head_mix (scores)",
            &move |tape, scores| {
                let g = tape.constant(gate.clone());
                let y = tape.head_mix(scores, g)?;
                let y = tape.swish(y);
                Ok(tape.sum(y))
            },
            &point,
        );

        let mut rng = Rng::new(40);
        let scores = rand_t(vec![2, 3, 4], &mut rng);
        let point = rand_t(vec![3, 2], &mut rng);
        assert_grad_ok(
            "head_mix (gate)",
            &move |tape, gate| {
                let s = tape.constant(scores.clone());
                let y = tape.head_mix(s, gate)?;
                let y = tape.swish(y);
                Ok(tape.sum(y))
            },
            &point,
        );
    }

    #[test]
    fn kl_rows_gradient() {
        let mut rng = Rng::new(41);
        // Healthy gold distributions so the log floor stays inactive.
        let mut gold = Tensor::from_fn(vec![3, 4], |_| rng.uniform() + 0.1);
        for r in 0..3 {
            let s: f64 = gold.row(r).iter().sum();
            for v in gold.row_mut(r) {
                *v /= s;
            }
        }
        let point = rand_t(vec![3, 4], &mut rng);
        assert_grad_ok(
            "kl_rows",
            &move |tape, logits| tape.kl_rows(logits, gold.clone(), &[true, true, false]),
            &point,
        );
    }

    #[test]
    fn check_rejects_shape_mismatch() {
        let p = Tensor::zeros(vec![2, 2]);
        let g = Tensor::zeros(vec![4]);
        assert!(finite_difference_check(|_| Ok(0.0), &p, &g, 1e-5).is_err());
    }

    #[test]
    fn check_rejects_non_finite_function() {
        let p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![2]);
        assert!(finite_difference_check(|_| Ok(f64::INFINITY), &p, &g, 1e-5).is_err());
    }
}
