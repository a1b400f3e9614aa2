//! The assembled experience-to-text model: encoders, spanning influence,
//! fusion and the conditioned decoder, plus checkpoint I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EPassage, ExperienceSequence, BOS, SEP};
use crate::decoder::{
    apply_sampling_filters, sample_from, Conditioning, DecodeOutput, Decoder, DecoderConfig, GenerationConfig,
    IncrementalDecoder, PassageLayout,
};
use crate::encoder::Encoder;
use crate::error::{validation, Error, Result};
use crate::fusion::{fuse, FusionOutput, FusionParams};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{derived, Rng, Stream};
use crate::span::{span_attention, uniform_span, SpanOutput};
use crate::tensor::{Tape, Tensor, Var};

/// Graph variants. The default is the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Fixed uniform spanning weights and no regularizer.
    pub no_span_attention: bool,
    /// No topic prefix position in the decoder.
    pub no_t_prompt: bool,
    /// Image channel inputs replaced by zeros.
    pub no_image: bool,
    /// Text channel inputs replaced by zeros.
    pub no_text: bool,
    /// Experience rows multiply the token embeddings instead of adding.
    pub sent_mul: bool,
    /// Fused embeddings divided by `L^2`.
    pub fusion_normalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub steps: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_sentence_len: usize,
    pub span_heads: usize,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            embed_dim: 64,
            hidden: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 512,
            max_sentence_len: 12,
            span_heads: 1,
            ablations: Ablations::default(),
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("steps", self.steps),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("max_sentence_len", self.max_sentence_len),
            ("span_heads", self.span_heads),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(validation(format!("{name} must be positive")));
        }
        if self.embed_dim < 2 || self.hidden < 2 {
            return Err(validation("embed_dim and hidden must be at least 2"));
        }
        self.decoder_config().validate()
    }

    pub fn max_positions(&self) -> usize {
        1 + self.steps * (self.max_sentence_len + 1)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions(),
            d_cond: self.hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mmtg {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub span_image: ParamId,
    pub span_text: ParamId,
    pub fusion: FusionParams,
    pub decoder: Decoder,
}

/// Intermediate values of one encoding pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub topic: Var,
    pub image_states: Var,
    pub text_states: Var,
    pub image_span: SpanOutput,
    pub text_span: SpanOutput,
    pub fusion: FusionOutput,
}

impl Encoded {
    pub fn experience(&self) -> Var {
        self.fusion.experience
    }
}

const MAGIC: &[u8; 8] = b"MMTGCKPT";
const VERSION: u32 = 1;

impl Mmtg {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived(config.seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, config.embed_dim, config.hidden, &mut rng);
        let bound = 1.0 / (config.hidden as f64).sqrt();
        let span_shape = [config.hidden, config.span_heads * config.steps];
        let span_image = params.add_uniform("span.image", &span_shape, bound, &mut rng);
        let span_text = params.add_uniform("span.text", &span_shape, bound, &mut rng);
        let fusion = FusionParams::register(&mut params, config.hidden, &mut rng);
        let decoder = Decoder::register(&mut params, config.decoder_config(), config.steps, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            span_image,
            span_text,
            fusion,
            decoder,
        })
    }

    pub fn conditioning_mode(&self) -> Conditioning {
        if self.config.ablations.sent_mul {
            Conditioning::Multiply
        } else {
            Conditioning::Add
        }
    }

    /// Checks that a record fits this model's dimensions.
    pub fn check_passage(&self, p: &EPassage) -> Result<()> {
        p.validate(self.config.steps, self.config.embed_dim, self.config.vocab_size)?;
        if let Some(s) = p.target.iter().find(|s| s.len() > self.config.max_sentence_len) {
            return Err(validation(format!(
                "sample {} has a sentence of {} tokens, the model allows {}",
                p.sample_id,
                s.len(),
                self.config.max_sentence_len
            )));
        }
        Ok(())
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, input: &ExperienceSequence) -> Result<Encoded> {
        let cfg = &self.config;
        input.validate(cfg.steps, cfg.embed_dim)?;
        let ab = &cfg.ablations;
        let blank = || Tensor::zeros(&[cfg.steps, cfg.embed_dim]);
        let images = tape.constant(if ab.no_image { blank() } else { input.image_matrix()? });
        let texts = tape.constant(if ab.no_text { blank() } else { input.text_matrix()? });
        let topic_in = tape.constant(Tensor::row(input.topic_embedding.clone())?);
        let topic = self.encoder.topic.forward(tape, p, topic_in)?;
        let (image_states, text_states) = self.encoder.process_channels(tape, p, images, texts)?;
        let (image_span, text_span) = if ab.no_span_attention {
            (uniform_span(tape, image_states)?, uniform_span(tape, text_states)?)
        } else {
            (
                span_attention(tape, image_states, p.var(self.span_image), cfg.span_heads)?,
                span_attention(tape, text_states, p.var(self.span_text), cfg.span_heads)?,
            )
        };
        let fusion = fuse(
            tape,
            p,
            &self.fusion,
            topic,
            image_span.partials,
            text_span.partials,
            ab.fusion_normalize,
        )?;
        Ok(Encoded {
            topic,
            image_states,
            text_states,
            image_span,
            text_span,
            fusion,
        })
    }

    /// Decoder positions for `target`, with the topic prefix unless ablated.
    pub fn layout(&self, target: &[Vec<u32>]) -> Result<PassageLayout> {
        PassageLayout::new(target, !self.config.ablations.no_t_prompt)
    }

    /// Teacher-forced pass over a passage.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        input: &ExperienceSequence,
        target: &[Vec<u32>],
    ) -> Result<(DecodeOutput, Encoded)> {
        let enc = self.encode(tape, p, input)?;
        let cond = self.decoder.project_experience(tape, p, enc.experience())?;
        let layout = self.layout(target)?;
        let topic = layout.prefix.then_some(enc.topic);
        let out = self
            .decoder
            .forward(tape, p, &layout, Some(cond), self.conditioning_mode(), topic)?;
        Ok((out, enc))
    }

    /// Per-token log-likelihoods of `target` without gradient tracking.
    pub fn token_log_probs(&self, input: &ExperienceSequence, target: &[Vec<u32>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (out, _) = self.forward(&mut tape, &p, input, target)?;
        Ok(tape.value(out.target_log_probs).data().to_vec())
    }

    /// Mean target log-likelihood.
    pub fn score(&self, input: &ExperienceSequence, target: &[Vec<u32>]) -> Result<f64> {
        crate::decoder::sequence_score(&self.token_log_probs(input, target)?)
    }

    /// `exp` of the mean per-token negative log-likelihood over all passages.
    pub fn perplexity(&self, passages: &[EPassage]) -> Result<f64> {
        if passages.is_empty() {
            return Err(validation("perplexity needs at least one passage"));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for p in passages {
            let lp = self.token_log_probs(&p.input, &p.target)?;
            total += lp.iter().sum::<f64>();
            count += lp.len();
        }
        Ok((-total / count as f64).exp())
    }

    /// Projected conditioning rows `[L x d_model]` and projected topic `[d_h]`.
    pub fn conditioning(&self, input: &ExperienceSequence) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let enc = self.encode(&mut tape, &p, input)?;
        let cond = self.decoder.project_experience(&mut tape, &p, enc.experience())?;
        Ok((tape.value(cond).clone(), tape.value(enc.topic).data().to_vec()))
    }

    /// Samples one passage of `L` sentences.
    pub fn generate(&self, input: &ExperienceSequence, cfg: &GenerationConfig, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
        cfg.validate()?;
        if cfg.max_len > self.config.max_sentence_len {
            return Err(validation(format!(
                "max_len {} exceeds the model's sentence limit {}",
                cfg.max_len, self.config.max_sentence_len
            )));
        }
        let (cond, topic) = self.conditioning(input)?;
        let mut dec = IncrementalDecoder::new(&self.decoder, &self.params, Some(cond), self.conditioning_mode())?;
        if !self.config.ablations.no_t_prompt {
            dec.push_prefix(&topic)?;
        }
        let mut history = Vec::new();
        let mut passage = Vec::with_capacity(self.config.steps);
        for k in 0..self.config.steps {
            let mut logits = dec.push_token(if k == 0 { BOS } else { SEP }, k)?;
            let mut sentence = Vec::new();
            loop {
                logits[BOS as usize] = f64::NEG_INFINITY;
                if sentence.is_empty() {
                    logits[SEP as usize] = f64::NEG_INFINITY;
                }
                let probs = apply_sampling_filters(&logits, &history, cfg);
                let token = sample_from(&probs, rng);
                if token == SEP {
                    break;
                }
                sentence.push(token);
                history.push(token);
                logits = dec.push_token(token, k)?;
                if sentence.len() == cfg.max_len {
                    break;
                }
            }
            passage.push(sentence);
        }
        Ok(passage)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let cfg_len = read_u64(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        r.read_exact(&mut cfg).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        let config: ModelConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config)?;
        let count = read_u64(&mut r)? as usize;
        if count != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, model expects {}",
                model.params.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if name != model.params.names()[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {name}, expected {}",
                    model.params.names()[i]
                )));
            }
            let rank = read_u64(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(read_u64(&mut r)?));
            }
            tensors.push(Tensor::new(shape, data)?);
        }
        model.params.set_all(tensors).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }
}
