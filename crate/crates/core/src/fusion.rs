//! Attentive fusion of the projected topic with the image and text partial
//! states into one experience embedding per output sentence.

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{kernels, Tape, Var};

/// One scoring vector per modality.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub topic: ParamId,
    pub image: ParamId,
    pub text: ParamId,
}

impl FusionParams {
    pub fn register(store: &mut ParamStore, d_h: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        Self {
            topic: store.add_uniform("fusion.topic", &[d_h, 1], bound, rng),
            image: store.add_uniform("fusion.image", &[d_h, 1], bound, rng),
            text: store.add_uniform("fusion.text", &[d_h, 1], bound, rng),
        }
    }
}

/// Softmax over the three modality logits `<w_t, t>`, `<w_i, h_i>`, `<w_x, h_x>`.
pub fn modality_attention(
    topic: &[f64],
    image: &[f64],
    text: &[f64],
    scorers: [&[f64]; 3],
) -> Result<[f64; 3]> {
    let d = topic.len();
    if image.len() != d || text.len() != d || scorers.iter().any(|s| s.len() != d) {
        return Err(crate::Error::Dimension {
            op: "modality_attention",
            lhs: vec![d],
            rhs: vec![image.len(), text.len()],
        });
    }
    let mut beta = [
        kernels::dot(scorers[0], topic),
        kernels::dot(scorers[1], image),
        kernels::dot(scorers[2], text),
    ];
    kernels::softmax_in_place(&mut beta);
    Ok(beta)
}

/// Experience embeddings `[L x d_h]` and the modality weights `[L^3 x 3]`.
/// Row `(k*L + j)*L + j2` of `beta` weighs topic, image partial `(j, k)` and
/// text partial `(j2, k)`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub experience: Var,
    pub beta: Var,
}

/// `e_k = sum_j sum_j2 (b_t t + b_i hI[j,k] + b_x hT[j2,k])` with the weights
/// recomputed for every `(j, j2, k)`. `normalize` divides by `L^2`.
pub fn fuse(
    tape: &mut Tape,
    p: &Bound,
    params: &FusionParams,
    topic: Var,
    image_partials: Var,
    text_partials: Var,
    normalize: bool,
) -> Result<FusionOutput> {
    let sq = tape.shape(image_partials)[0];
    let steps = (sq as f64).sqrt().round() as usize;
    if steps * steps != sq || tape.shape(text_partials) != tape.shape(image_partials) {
        return Err(crate::Error::Dimension {
            op: "fuse",
            lhs: tape.shape(image_partials).to_vec(),
            rhs: tape.shape(text_partials).to_vec(),
        });
    }
    let st = tape.matmul(topic, p.var(params.topic))?;
    let si = tape.matmul(image_partials, p.var(params.image))?;
    let sx = tape.matmul(text_partials, p.var(params.text))?;
    let logits = tape.concat_rows(&[st, si, sx])?;

    // Columns of the stacked source matrix: topic, image partials, text partials.
    let width = 1 + 2 * sq;
    let cube = steps * steps * steps;
    let mut pick = Vec::with_capacity(cube * 3);
    let mut place = Vec::with_capacity(cube * 3);
    for k in 0..steps {
        for j in 0..steps {
            for j2 in 0..steps {
                let cols = [0, 1 + j * steps + k, 1 + sq + j2 * steps + k];
                pick.extend(cols);
                place.extend(cols.map(|c| k * width + c));
            }
        }
    }
    let z = tape.gather(logits, &pick, &[cube, 3])?;
    let beta = tape.softmax_rows(z)?;
    let coeff = tape.scatter_add(beta, &place, &[steps, width])?;
    let sources = tape.concat_rows(&[topic, image_partials, text_partials])?;
    let mut e = tape.matmul(coeff, sources)?;
    if normalize {
        e = tape.scale(e, 1.0 / sq as f64);
    }
    Ok(FusionOutput { experience: e, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_tensors, Tensor};
    use rand::{Rng as _, SeedableRng};

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Case {
        store: ParamStore,
        params: FusionParams,
        topic: Tensor,
        image: Tensor,
        text: Tensor,
    }

    fn case(steps: usize, d: usize, seed: u64) -> Case {
        let mut rng = Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::register(&mut store, d, &mut rng);
        Case {
            topic: random(&[1, d], &mut rng),
            image: random(&[steps * steps, d], &mut rng),
            text: random(&[steps * steps, d], &mut rng),
            store,
            params,
        }
    }

    fn run(c: &Case, normalize: bool) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let p = c.store.bind_frozen(&mut tape);
        let t = tape.constant(c.topic.clone());
        let i = tape.constant(c.image.clone());
        let x = tape.constant(c.text.clone());
        let out = fuse(&mut tape, &p, &c.params, t, i, x, normalize).unwrap();
        (tape.value(out.experience).clone(), tape.value(out.beta).clone())
    }

    /// Direct triple loop over the defining double sum.
    fn oracle(c: &Case, steps: usize) -> Vec<Vec<f64>> {
        let d = c.topic.len();
        let s = [
            c.store.get(c.params.topic).data(),
            c.store.get(c.params.image).data(),
            c.store.get(c.params.text).data(),
        ];
        let mut e = vec![vec![0.0; d]; steps];
        for (k, ek) in e.iter_mut().enumerate() {
            for j in 0..steps {
                for j2 in 0..steps {
                    let hi = c.image.row_slice(j * steps + k);
                    let ht = c.text.row_slice(j2 * steps + k);
                    let b = modality_attention(c.topic.data(), hi, ht, s).unwrap();
                    for dd in 0..d {
                        ek[dd] += b[0] * c.topic.data()[dd] + b[1] * hi[dd] + b[2] * ht[dd];
                    }
                }
            }
        }
        e
    }

    #[test]
    fn matches_the_triple_loop() {
        for (steps, seed) in [(1, 0), (2, 1), (3, 2), (5, 3)] {
            let c = case(steps, 4, seed);
            let (e, _) = run(&c, false);
            for (k, row) in oracle(&c, steps).iter().enumerate() {
                for (a, b) in e.row_slice(k).iter().zip(row) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn modality_attention_examples() {
        let z = [0.0; 2];
        let b = modality_attention(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], [&z, &z, &z]).unwrap();
        assert!(b.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let one = [1.0, 0.0];
        let b = modality_attention(&[2f64.ln(), 0.0], &[0.0, 1.0], &[0.0, 1.0], [&one, &one, &one]).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.25).abs() < 1e-12 && (b[2] - 0.25).abs() < 1e-12);
        assert!(modality_attention(&[1.0], &[1.0, 2.0], &[1.0], [&one, &one, &one]).is_err());
    }

    #[test]
    fn zeroed_partials_leave_the_topic_weighted_by_a_third() {
        let mut c = case(3, 4, 7);
        c.image = Tensor::zeros(&[9, 4]);
        c.text = Tensor::zeros(&[9, 4]);
        for id in [c.params.topic, c.params.image, c.params.text] {
            c.store.get_mut(id).data_mut().fill(0.0);
        }
        let (e, _) = run(&c, false);
        for k in 0..3 {
            for (a, t) in e.row_slice(k).iter().zip(c.topic.data()) {
                assert!((a - 9.0 / 3.0 * t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_is_bounded_and_normalization_divides_exactly() {
        for seed in 0..20 {
            let c = case(4, 3, seed);
            let (e, beta) = run(&c, false);
            let (en, _) = run(&c, true);
            for r in 0..64 {
                assert!((beta.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for k in 0..4 {
                let mut bound = norm(c.topic.data());
                for j in 0..4 {
                    bound = bound.max(norm(c.image.row_slice(j * 4 + k))).max(norm(c.text.row_slice(j * 4 + k)));
                }
                assert!(norm(e.row_slice(k)) <= 16.0 * bound + 1e-12);
                for (a, b) in e.row_slice(k).iter().zip(en.row_slice(k)) {
                    assert_eq!(a / 16.0, *b);
                }
            }
        }
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        for seed in 0..10 {
            let c = case(3, 4, seed);
            let mut rng = Rng::seed_from_u64(seed + 50);
            let probe = random(&[3, 4], &mut rng);
            let report = grad_check_tensors(
                |tape, xs| {
                    let p = c
                        .store
                        .bind_frozen(tape)
                        .with(c.params.topic, xs[0])
                        .with(c.params.image, xs[1])
                        .with(c.params.text, xs[2]);
                    let t = tape.constant(c.topic.clone());
                    let i = tape.constant(c.image.clone());
                    let x = tape.constant(c.text.clone());
                    let out = fuse(tape, &p, &c.params, t, i, x, false)?;
                    let probe = tape.constant(probe.clone());
                    let prod = tape.mul(out.experience, probe)?;
                    Ok(tape.sum(prod))
                },
                &[
                    c.store.get(c.params.topic).clone(),
                    c.store.get(c.params.image).clone(),
                    c.store.get(c.params.text).clone(),
                ],
                &[true, true, true],
                1e-4,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn other_steps_do_not_move_an_image_contribution() {
        let steps = 3;
        let image_term = |c: &Case, beta: &Tensor, j0: usize, k: usize| -> Vec<f64> {
            let w: f64 = (0..steps).map(|j2| beta.get((k * steps + j0) * steps + j2, 1)).sum();
            c.image.row_slice(j0 * steps + k).iter().map(|v| w * v).collect()
        };
        let mut c = case(steps, 4, 11);
        let (_, beta) = run(&c, false);
        let before: Vec<_> = (0..steps).map(|k| image_term(&c, &beta, 0, k)).collect();
        for r in steps..steps * steps {
            c.image.data_mut()[r * 4] += 0.7;
        }
        let (_, beta) = run(&c, false);
        for (k, b) in before.iter().enumerate() {
            assert_eq!(&image_term(&c, &beta, 0, k), b);
        }
    }
}
