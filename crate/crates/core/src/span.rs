//! Spanning influence: each step's hidden state is split across the output
//! positions by a learned row-stochastic matrix, and that matrix is pulled
//! toward a Gaussian centred on the step's own position.

use crate::error::{validation, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Attention matrix `[L x L]` and partial states `[L*L x d_h]`, where row
/// `j*L + k` of the partials is `alpha[j][k] * h_j`.
#[derive(Clone, Copy, Debug)]
pub struct SpanOutput {
    pub alpha: Var,
    pub partials: Var,
}

/// `alpha[j] = softmax(h_j W)` with `W: [d_h x heads*L]`. With several heads
/// the per-head softmax rows are averaged.
pub fn span_attention(tape: &mut Tape, states: Var, w: Var, heads: usize) -> Result<SpanOutput> {
    let (steps, d_h) = match tape.shape(states) {
        [l, d] => (*l, *d),
        s => {
            return Err(crate::Error::Dimension {
                op: "span_attention",
                lhs: s.to_vec(),
                rhs: tape.shape(w).to_vec(),
            })
        }
    };
    if heads == 0 || tape.shape(w) != [d_h, heads * steps] {
        return Err(crate::Error::Dimension {
            op: "span_attention",
            lhs: tape.shape(states).to_vec(),
            rhs: tape.shape(w).to_vec(),
        });
    }
    let logits = tape.matmul(states, w)?;
    let alpha = if heads == 1 {
        tape.softmax_rows(logits)?
    } else {
        let per_head = tape.reshape(logits, &[steps * heads, steps])?;
        let per_head = tape.softmax_rows(per_head)?;
        let mut avg = Tensor::zeros(&[steps, steps * heads]);
        for j in 0..steps {
            for h in 0..heads {
                avg.data_mut()[j * steps * heads + j * heads + h] = 1.0 / heads as f64;
            }
        }
        let avg = tape.constant(avg);
        tape.matmul(avg, per_head)?
    };
    let partials = partial_states(tape, states, alpha)?;
    Ok(SpanOutput { alpha, partials })
}

/// Fixed uniform split, `alpha[j][k] = 1/L`.
pub fn uniform_span(tape: &mut Tape, states: Var) -> Result<SpanOutput> {
    let steps = tape.shape(states)[0];
    let alpha = tape.constant(Tensor::full(&[steps, steps], 1.0 / steps as f64));
    let partials = partial_states(tape, states, alpha)?;
    Ok(SpanOutput { alpha, partials })
}

fn partial_states(tape: &mut Tape, states: Var, alpha: Var) -> Result<Var> {
    let steps = tape.shape(states)[0];
    let rows: Vec<usize> = (0..steps).flat_map(|j| std::iter::repeat_n(j, steps)).collect();
    let repeated = tape.gather_rows(states, &rows)?;
    let weights = tape.reshape(alpha, &[steps * steps])?;
    tape.mul_col(repeated, weights)
}

/// Row `j` is `exp(-(k - j)^2 / 2)` over `k = 1..L`, normalized.
pub fn gaussian_prior(steps: usize) -> Tensor {
    let mut t = Tensor::zeros(&[steps.max(1), steps.max(1)]);
    let n = steps.max(1);
    for j in 0..n {
        let row = &mut t.data_mut()[j * n..(j + 1) * n];
        for (k, v) in row.iter_mut().enumerate() {
            let d = k as f64 - j as f64;
            *v = (-d * d / 2.0).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// `(1 / 2L) * sum over both channels and all rows of KL(alpha_j || prior_j)`.
pub fn span_regularizer(tape: &mut Tape, alpha_image: Var, alpha_text: Var, prior: &Tensor) -> Result<Var> {
    let steps = prior.shape()[0];
    let ki = tape.kl_rows(alpha_image, prior)?;
    let kt = tape.kl_rows(alpha_text, prior)?;
    let both = tape.concat_rows(&[ki, kt])?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / (2 * steps) as f64))
}

/// Value-only regularizer with row validation.
pub fn span_regularizer_value(alpha_image: &Tensor, alpha_text: &Tensor, prior: &Tensor) -> Result<f64> {
    let steps = prior.dims2().0;
    let mut total = 0.0;
    for alpha in [alpha_image, alpha_text] {
        if alpha.shape() != prior.shape() {
            return Err(crate::Error::Dimension {
                op: "span_regularizer",
                lhs: alpha.shape().to_vec(),
                rhs: prior.shape().to_vec(),
            });
        }
        for j in 0..steps {
            let row = alpha.row_slice(j);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(validation(format!("attention row {j} is not normalized (sum {s})")));
            }
            total += kernels::kl_row(row, prior.row_slice(j));
        }
    }
    Ok(total / (2 * steps) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_tensors;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn attend(states: &Tensor, w: &Tensor, heads: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let w = tape.constant(w.clone());
        let out = span_attention(&mut tape, s, w, heads).unwrap();
        (tape.value(out.alpha).clone(), tape.value(out.partials).clone())
    }

    #[test]
    fn zero_projection_splits_evenly() {
        let states = random(&[4, 3], 1);
        let (alpha, partials) = attend(&states, &Tensor::zeros(&[3, 4]), 1);
        assert!(alpha.data().iter().all(|&a| (a - 0.25).abs() < 1e-15));
        for j in 0..4 {
            for k in 0..4 {
                for c in 0..3 {
                    let want = states.get(j, c) / 4.0;
                    assert!((partials.get(j * 4 + k, c) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn two_step_analytic_softmax() {
        // One-dimensional states make W h_1 = [ln 3, 0] easy to set.
        let states = Tensor::matrix(2, 1, vec![1.0, 0.5]).unwrap();
        let w = Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let (alpha, _) = attend(&states, &w, 1);
        assert!((alpha.get(0, 0) - 0.75).abs() < 1e-12);
        assert!((alpha.get(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn partials_reconstruct_states_with_heads() {
        for heads in [1, 4] {
            let states = random(&[5, 6], 2);
            let (alpha, partials) = attend(&states, &random(&[6, 5 * heads], 3), heads);
            for j in 0..5 {
                let s: f64 = alpha.row_slice(j).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                for c in 0..6 {
                    let sum: f64 = (0..5).map(|k| partials.get(j * 5 + k, c)).sum();
                    assert!((sum - states.get(j, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mismatched_projection_is_a_dimension_error() {
        let mut tape = Tape::new();
        let s = tape.constant(random(&[4, 3], 1));
        let w = tape.constant(random(&[3, 5], 2));
        assert!(matches!(span_attention(&mut tape, s, w, 1), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn prior_examples() {
        assert_eq!(gaussian_prior(1).data(), &[1.0]);
        let p = gaussian_prior(5);
        let r = p.row_slice(2);
        assert!((r[1] - r[3]).abs() < 1e-15 && (r[0] - r[4]).abs() < 1e-15);
        let first = p.row_slice(0);
        assert!((first[1] / first[0] - (-0.5f64).exp()).abs() < 1e-12);
        assert!(first.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn prior_rows_peak_at_their_step_and_decay() {
        for steps in 1..=9 {
            let p = gaussian_prior(steps);
            for j in 0..steps {
                let row = p.row_slice(j);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for k in 0..steps {
                    for k2 in 0..steps {
                        if k.abs_diff(j) <= k2.abs_diff(j) {
                            assert!(row[k] >= row[k2]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn regularizer_vanishes_at_the_prior() {
        let p = gaussian_prior(5);
        assert_eq!(span_regularizer_value(&p, &p, &p).unwrap(), 0.0);
        let u = Tensor::full(&[5, 5], 0.2);
        assert!(span_regularizer_value(&u, &p, &p).unwrap() > 0.0);
        let bad = Tensor::full(&[5, 5], 0.3);
        assert!(span_regularizer_value(&bad, &p, &p).is_err());
    }

    #[test]
    fn two_step_closed_form() {
        let prior = gaussian_prior(2);
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((prior.get(0, 0) - p).abs() < 1e-15);
        let alpha = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        // Row 2 of the prior mirrors row 1, so both rows give the same KL.
        let kl = 0.5 * (0.5 / p).ln() + 0.5 * (0.5 / (1.0 - p)).ln();
        let got = span_regularizer_value(&alpha, &alpha, &prior).unwrap();
        assert!((got - kl).abs() < 1e-12);
    }

    fn reg_value(states: &Tensor, w: &Tensor) -> (f64, Tensor) {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let wv = tape.param(w.clone());
        let out = span_attention(&mut tape, s, wv, 1).unwrap();
        let r = span_regularizer(&mut tape, out.alpha, out.alpha, &gaussian_prior(5)).unwrap();
        let g = tape.backward(r).unwrap().get(wv).unwrap();
        (tape.value(r).data()[0], g)
    }

    #[test]
    fn a_gradient_step_lowers_the_regularizer() {
        let states = random(&[5, 4], 4);
        let w = random(&[4, 5], 5);
        let (before, g) = reg_value(&states, &w);
        let stepped: Vec<f64> = w.data().iter().zip(g.data()).map(|(a, b)| a - 0.05 * b).collect();
        let (after, _) = reg_value(&states, &Tensor::matrix(4, 5, stepped).unwrap());
        assert!(after < before);
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let states = random(&[5, 4], seed);
            let report = grad_check_tensors(
                |tape, xs| {
                    let a = span_attention(tape, xs[0], xs[1], 1)?;
                    let b = span_attention(tape, xs[0], xs[2], 1)?;
                    span_regularizer(tape, a.alpha, b.alpha, &gaussian_prior(5))
                },
                &[states, random(&[4, 5], seed + 100), random(&[4, 5], seed + 200)],
                &[false, true, true],
                1e-4,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(seed in 0u64..10_000, steps in 1usize..7, heads in 1usize..5) {
            let (alpha, _) = attend(&random(&[steps, 3], seed), &random(&[3, heads * steps], seed + 1), heads);
            for j in 0..steps {
                let row = alpha.row_slice(j);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&a| a > 0.0 && a < 1.0 || steps == 1));
            }
        }
    }
}
