use super::{Conditioning, Decoder};
use crate::encoder::LN_EPS;
use crate::error::{validation, Result};
use crate::params::ParamStore;
use crate::tensor::{kernels, Tensor};

/// Position-by-position decoder that keeps per-layer key/value caches. It
/// calls the same kernels in the same order as [`Decoder::forward`].
pub struct IncrementalDecoder<'a> {
    dec: &'a Decoder,
    store: &'a ParamStore,
    conditioning: Option<Tensor>,
    mode: Conditioning,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

fn linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.dims2();
    let mut out = vec![0.0; n];
    kernels::matmul_acc(x, w.data(), &mut out, 1, k, n);
    out
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(dec: &'a Decoder, store: &'a ParamStore, conditioning: Option<Tensor>, mode: Conditioning) -> Result<Self> {
        if let Some(c) = &conditioning {
            if c.dims2().1 != dec.config.d_model {
                return Err(validation("conditioning width differs from d_model"));
            }
        }
        let per_layer = || vec![Vec::new(); dec.config.n_heads];
        Ok(Self {
            dec,
            store,
            conditioning,
            mode,
            keys: (0..dec.config.n_layers).map(|_| per_layer()).collect(),
            values: (0..dec.config.n_layers).map(|_| per_layer()).collect(),
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn w(&self, id: crate::params::ParamId) -> &'a Tensor {
        self.store.get(id)
    }

    /// Feeds the topic prefix. Must be the first position.
    pub fn push_prefix(&mut self, topic: &[f64]) -> Result<()> {
        if self.len != 0 {
            return Err(validation("the topic prefix must come first"));
        }
        if topic.len() != self.dec.config.d_cond {
            return Err(validation("topic width differs from the decoder's conditioning width"));
        }
        let x = linear(topic, self.w(self.dec.prefix_proj));
        self.advance(x).map(|_| ())
    }

    /// Feeds `token` as part of sentence `sentence` and returns next-token logits.
    pub fn push_token(&mut self, token: u32, sentence: usize) -> Result<Vec<f64>> {
        let cfg = &self.dec.config;
        if token as usize >= cfg.vocab_size {
            return Err(validation(format!("token id {token} outside vocabulary of {}", cfg.vocab_size)));
        }
        let mut x = self.w(self.dec.token_embedding).row_slice(token as usize).to_vec();
        if let Some(c) = &self.conditioning {
            if sentence >= c.dims2().0 {
                return Err(validation(format!("no conditioning row for sentence {sentence}")));
            }
            let row = c.row_slice(sentence);
            match self.mode {
                Conditioning::Add => add_in_place(&mut x, row),
                Conditioning::Multiply => x.iter_mut().zip(row).for_each(|(a, b)| *a *= b),
            }
        }
        self.advance(x)
    }

    fn advance(&mut self, mut x: Vec<f64>) -> Result<Vec<f64>> {
        let dec = self.dec;
        let cfg = &dec.config;
        if self.len >= cfg.max_positions {
            return Err(validation(format!("decoder is limited to {} positions", cfg.max_positions)));
        }
        add_in_place(&mut x, self.w(dec.position_embedding).row_slice(self.len));
        let d = cfg.d_model;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut xn = vec![0.0; d];
        for (l, b) in dec.blocks.iter().enumerate() {
            kernels::layer_norm_row(&x, self.w(b.ln1_gain).data(), self.w(b.ln1_bias).data(), LN_EPS, &mut xn);
            let mut attn: Option<Vec<f64>> = None;
            for (h, head) in b.heads.iter().enumerate() {
                let q = linear(&xn, self.w(head.wq));
                let k = linear(&xn, self.w(head.wk));
                let v = linear(&xn, self.w(head.wv));
                self.keys[l][h].extend(k);
                self.values[l][h].extend(v);
                let dk = q.len();
                let keys = &self.keys[l][h];
                let mut a: Vec<f64> = keys
                    .chunks(dk)
                    .map(|k| scale * kernels::dot(&q, k) + 0.0)
                    .map(|s| s + 0.0)
                    .collect();
                kernels::softmax_in_place(&mut a);
                let mut ctx = vec![0.0; dk];
                kernels::matmul_acc(&a, &self.values[l][h], &mut ctx, 1, a.len(), dk);
                let o = linear(&ctx, self.w(head.wo));
                attn = Some(match attn {
                    None => o,
                    Some(mut acc) => {
                        add_in_place(&mut acc, &o);
                        acc
                    }
                });
            }
            let mut attn = attn.expect("at least one head");
            add_in_place(&mut attn, self.w(b.out_bias).data());
            add_in_place(&mut x, &attn);
            kernels::layer_norm_row(&x, self.w(b.ln2_gain).data(), self.w(b.ln2_bias).data(), LN_EPS, &mut xn);
            let mut hdn = linear(&xn, self.w(b.ff_in));
            add_in_place(&mut hdn, self.w(b.ff_in_bias).data());
            hdn.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut out = linear(&hdn, self.w(b.ff_out));
            add_in_place(&mut out, self.w(b.ff_out_bias).data());
            add_in_place(&mut x, &out);
        }
        kernels::layer_norm_row(&x, self.w(dec.final_gain).data(), self.w(dec.final_bias).data(), LN_EPS, &mut xn);
        let mut logits = linear(&xn, self.w(dec.output));
        add_in_place(&mut logits, self.w(dec.output_bias).data());
        self.len += 1;
        Ok(logits)
    }
}
