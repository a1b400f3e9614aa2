//! Causal transformer decoder conditioned on one experience embedding per
//! sentence.
//!
//! A passage is laid out as an optional topic prefix position followed by
//! `BOS s1 SEP s2 SEP ... sL`. The boundary token opening sentence `k` and
//! every token of sentence `k` carry the conditioning row `k`, either added
//! to the token embedding or multiplied into it. Targets are each sentence's
//! tokens followed by `SEP`.

mod cache;
mod sampling;

pub use cache::IncrementalDecoder;
pub use sampling::{apply_sampling_filters, sample_from, GenerationConfig};

use serde::{Deserialize, Serialize};

use crate::data::{BOS, SEP};
use crate::encoder::LN_EPS;
use crate::error::{validation, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask value for future positions.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Width of the experience and topic vectors fed in.
    pub d_cond: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.d_model < 2 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(validation("decoder sizes must be positive (vocab >= 3, d_model >= 2)"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(validation(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<Head>,
    pub out_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub prefix_proj: ParamId,
    pub experience_proj: ParamId,
    pub blocks: Vec<Block>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub output: ParamId,
    pub output_bias: ParamId,
}

/// Token-level view of a teacher-forced passage, excluding the prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PassageLayout {
    pub prefix: bool,
    pub inputs: Vec<u32>,
    pub sentence: Vec<usize>,
    pub targets: Vec<u32>,
}

impl PassageLayout {
    pub fn new(target: &[Vec<u32>], prefix: bool) -> Result<Self> {
        if target.is_empty() || target.iter().any(Vec::is_empty) {
            return Err(validation("every target sentence needs at least one token"));
        }
        let mut layout = Self {
            prefix,
            inputs: Vec::new(),
            sentence: Vec::new(),
            targets: Vec::new(),
        };
        for (k, s) in target.iter().enumerate() {
            layout.inputs.push(if k == 0 { BOS } else { SEP });
            layout.inputs.extend(s);
            layout.targets.extend(s);
            layout.targets.push(SEP);
            layout.sentence.extend(std::iter::repeat_n(k, s.len() + 1));
        }
        Ok(layout)
    }

    /// Positions including the prefix.
    pub fn positions(&self) -> usize {
        self.inputs.len() + usize::from(self.prefix)
    }
}

/// How the conditioning row meets the token embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Add,
    Multiply,
}

pub struct DecodeOutput {
    /// Log-probabilities `[n x V]`, one row per non-prefix position.
    pub log_probs: Var,
    /// Log-probability of each target token, `[n]`.
    pub target_log_probs: Var,
}

fn uniform(store: &mut ParamStore, name: String, shape: &[usize], bound: f64, rng: &mut Rng) -> ParamId {
    store.add_uniform(name, shape, bound, rng)
}

impl Decoder {
    /// `steps` scales the experience projection down by the `L^2` terms
    /// summed into each experience embedding.
    pub fn register(store: &mut ParamStore, config: DecoderConfig, steps: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let dk = config.head_dim();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let token_embedding = uniform(store, "dec.token_embedding".into(), &[v, d], inv(d), rng);
        let position_embedding = uniform(store, "dec.position_embedding".into(), &[config.max_positions, d], inv(d), rng);
        let prefix_proj = uniform(store, "dec.prefix_proj".into(), &[config.d_cond, d], inv(config.d_cond), rng);
        let exp_bound = inv(config.d_cond) / (steps * steps).max(1) as f64;
        let experience_proj = uniform(store, "dec.experience_proj".into(), &[config.d_cond, d], exp_bound, rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let pre = format!("dec.block{l}");
            let ln1_gain = store.add_const(format!("{pre}.ln1_gain"), &[d], 1.0);
            let ln1_bias = store.add_const(format!("{pre}.ln1_bias"), &[d], 0.0);
            let heads = (0..config.n_heads)
                .map(|h| Head {
                    wq: uniform(store, format!("{pre}.head{h}.wq"), &[d, dk], inv(d), rng),
                    wk: uniform(store, format!("{pre}.head{h}.wk"), &[d, dk], inv(d), rng),
                    wv: uniform(store, format!("{pre}.head{h}.wv"), &[d, dk], inv(d), rng),
                    wo: uniform(store, format!("{pre}.head{h}.wo"), &[dk, d], inv(d), rng),
                })
                .collect();
            blocks.push(Block {
                ln1_gain,
                ln1_bias,
                heads,
                out_bias: store.add_const(format!("{pre}.out_bias"), &[d], 0.0),
                ln2_gain: store.add_const(format!("{pre}.ln2_gain"), &[d], 1.0),
                ln2_bias: store.add_const(format!("{pre}.ln2_bias"), &[d], 0.0),
                ff_in: uniform(store, format!("{pre}.ff_in"), &[d, f], inv(d), rng),
                ff_in_bias: store.add_const(format!("{pre}.ff_in_bias"), &[f], 0.0),
                ff_out: uniform(store, format!("{pre}.ff_out"), &[f, d], inv(f), rng),
                ff_out_bias: store.add_const(format!("{pre}.ff_out_bias"), &[d], 0.0),
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            prefix_proj,
            experience_proj,
            blocks,
            final_gain: store.add_const("dec.final_gain", &[d], 1.0),
            final_bias: store.add_const("dec.final_bias", &[d], 0.0),
            output: uniform(store, "dec.output".into(), &[d, v], inv(d), rng),
            output_bias: store.add_const("dec.output_bias", &[v], 0.0),
            config,
        })
    }

    /// Projects experience embeddings `[L x d_cond]` to conditioning rows `[L x d_model]`.
    pub fn project_experience(&self, tape: &mut Tape, p: &Bound, experience: Var) -> Result<Var> {
        tape.matmul(experience, p.var(self.experience_proj))
    }

    /// Teacher-forced forward pass. `conditioning` has one row per sentence;
    /// `None` runs the plain decoder. `topic` is the `[1 x d_cond]` prefix
    /// input, required exactly when the layout has a prefix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &PassageLayout,
        conditioning: Option<Var>,
        mode: Conditioning,
        topic: Option<Var>,
    ) -> Result<DecodeOutput> {
        let cfg = &self.config;
        let positions = layout.positions();
        if positions > cfg.max_positions {
            return Err(validation(format!(
                "passage needs {positions} positions, decoder has {}",
                cfg.max_positions
            )));
        }
        if let Some(&bad) = layout.inputs.iter().chain(&layout.targets).find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(validation(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if layout.prefix != topic.is_some() {
            return Err(validation("topic prefix input does not match the layout"));
        }
        let rows: Vec<usize> = layout.inputs.iter().map(|&t| t as usize).collect();
        let mut x = tape.gather_rows(p.var(self.token_embedding), &rows)?;
        if let Some(c) = conditioning {
            let sentences = layout.sentence.iter().max().map_or(0, |m| m + 1);
            if tape.shape(c) != [sentences, cfg.d_model] {
                return Err(crate::Error::Dimension {
                    op: "decoder conditioning",
                    lhs: tape.shape(c).to_vec(),
                    rhs: vec![sentences, cfg.d_model],
                });
            }
            let per_token = tape.gather_rows(c, &layout.sentence)?;
            x = match mode {
                Conditioning::Add => tape.add(x, per_token)?,
                Conditioning::Multiply => tape.mul(x, per_token)?,
            };
        }
        if let Some(t) = topic {
            let prefix = tape.matmul(t, p.var(self.prefix_proj))?;
            x = tape.concat_rows(&[prefix, x])?;
        }
        let pos: Vec<usize> = (0..positions).collect();
        let pos = tape.gather_rows(p.var(self.position_embedding), &pos)?;
        x = tape.add(x, pos)?;

        let mut mask = Tensor::zeros(&[positions, positions]);
        for i in 0..positions {
            for j in i + 1..positions {
                mask.data_mut()[i * positions + j] = MASKED;
            }
        }
        let mask = tape.constant(mask);
        for block in &self.blocks {
            x = self.block_forward(tape, p, block, x, mask)?;
        }
        if layout.prefix {
            let keep: Vec<usize> = (1..positions).collect();
            x = tape.gather_rows(x, &keep)?;
        }
        let x = tape.layer_norm_rows(x, p.var(self.final_gain), p.var(self.final_bias), LN_EPS)?;
        let logits = tape.matmul(x, p.var(self.output))?;
        let logits = tape.add_row(logits, p.var(self.output_bias))?;
        let log_probs = tape.log_softmax_rows(logits)?;
        let v = cfg.vocab_size;
        let index: Vec<usize> = layout.targets.iter().enumerate().map(|(i, &t)| i * v + t as usize).collect();
        let target_log_probs = tape.gather(log_probs, &index, &[index.len()])?;
        Ok(DecodeOutput {
            log_probs,
            target_log_probs,
        })
    }

    fn block_forward(&self, tape: &mut Tape, p: &Bound, b: &Block, x: Var, mask: Var) -> Result<Var> {
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let xn = tape.layer_norm_rows(x, p.var(b.ln1_gain), p.var(b.ln1_bias), LN_EPS)?;
        let mut attn: Option<Var> = None;
        for h in &b.heads {
            let q = tape.matmul(xn, p.var(h.wq))?;
            let k = tape.matmul(xn, p.var(h.wk))?;
            let v = tape.matmul(xn, p.var(h.wv))?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let s = tape.add(s, mask)?;
            let a = tape.softmax_rows(s)?;
            let ctx = tape.matmul(a, v)?;
            let o = tape.matmul(ctx, p.var(h.wo))?;
            attn = Some(match attn {
                None => o,
                Some(acc) => tape.add(acc, o)?,
            });
        }
        let attn = tape.add_row(attn.expect("at least one head"), p.var(b.out_bias))?;
        let x = tape.add(x, attn)?;
        let xn = tape.layer_norm_rows(x, p.var(b.ln2_gain), p.var(b.ln2_bias), LN_EPS)?;
        let h = tape.matmul(xn, p.var(b.ff_in))?;
        let h = tape.add_row(h, p.var(b.ff_in_bias))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, p.var(b.ff_out))?;
        let h = tape.add_row(h, p.var(b.ff_out_bias))?;
        tape.add(x, h)
    }
}

/// Mean target log-likelihood.
pub fn sequence_score(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(validation("cannot score an empty target"));
    }
    Ok(log_probs.iter().sum::<f64>() / log_probs.len() as f64)
}
