//! Finite-difference checks of every parameterized component at small sizes.

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, EPassage, SynthConfig};
use crate::decoder::PassageLayout;
use crate::error::Result;
use crate::model::{Mmtg, ModelConfig};
use crate::params::Bound;
use crate::rng::Rng;
use crate::span::{gaussian_prior, span_regularizer};
use crate::tensor::{grad_check_tensors, GradCheckReport, Tape, Tensor, Var};
use crate::training::{batch_loss, TrainingBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    ChannelGru,
    TopicProjector,
    SpanWeights,
    FusionScorers,
    Decoder,
    Loss,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::ChannelGru,
        Group::TopicProjector,
        Group::SpanWeights,
        Group::FusionScorers,
        Group::Decoder,
        Group::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ChannelGru => "channel GRUs",
            Group::TopicProjector => "topic projector",
            Group::SpanWeights => "span weights",
            Group::FusionScorers => "fusion scorers",
            Group::Decoder => "decoder",
            Group::Loss => "loss",
        }
    }

    fn owns(self, param: &str) -> bool {
        match self {
            Group::ChannelGru => param.starts_with("image.") || param.starts_with("text."),
            Group::TopicProjector => param.starts_with("topic."),
            Group::SpanWeights => param.starts_with("span."),
            Group::FusionScorers => param.starts_with("fusion."),
            Group::Decoder => param.starts_with("dec."),
            Group::Loss => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub eps: f64,
    pub tol: f64,
    /// Adds a term whose gradient is deliberately dropped, so the check must fail.
    pub inject_fault: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            eps: 1e-4,
            tol: 1e-4,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: Group,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn fixture(seed: u64) -> Result<(Mmtg, Vec<EPassage>)> {
    let data = generate_corpus(&SynthConfig {
        steps: 3,
        vocab_size: 24,
        embed_dim: 4,
        n_passages: 2,
        test_passages: 1,
        sentence_len: 3,
        n_concepts: 6,
        n_topics: 2,
        topic_words: 4,
        seed,
        ..SynthConfig::default()
    })?
    .leveled_train()?;
    let model = Mmtg::new(ModelConfig {
        steps: 3,
        embed_dim: 4,
        hidden: 4,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        vocab_size: 24,
        max_sentence_len: 3,
        seed,
        ..ModelConfig::default()
    })?;
    Ok((model, data))
}

fn projection(tape: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

fn objective(tape: &mut Tape, p: &Bound, model: &Mmtg, data: &[EPassage], group: Group, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed_from_u64(seed);
    let pos = &data[0];
    let enc = model.encode(tape, p, &pos.input)?;
    match group {
        Group::ChannelGru => {
            let a = projection(tape, enc.image_states, &mut rng)?;
            let b = projection(tape, enc.text_states, &mut rng)?;
            tape.add(a, b)
        }
        Group::TopicProjector => projection(tape, enc.topic, &mut rng),
        Group::SpanWeights => {
            let a = projection(tape, enc.image_span.partials, &mut rng)?;
            let b = projection(tape, enc.text_span.partials, &mut rng)?;
            let reg = span_regularizer(
                tape,
                enc.image_span.alpha,
                enc.text_span.alpha,
                &gaussian_prior(model.config.steps),
            )?;
            let ab = tape.add(a, b)?;
            tape.add(ab, reg)
        }
        Group::FusionScorers => projection(tape, enc.experience(), &mut rng),
        Group::Decoder => {
            let cond = model.decoder.project_experience(tape, p, enc.experience())?;
            let layout = PassageLayout::new(&pos.target, true)?;
            let out = model
                .decoder
                .forward(tape, p, &layout, Some(cond), model.conditioning_mode(), Some(enc.topic))?;
            let nll = tape.sum(out.target_log_probs);
            Ok(tape.scale(nll, -1.0))
        }
        Group::Loss => {
            // Sample 0's level-5 and level-1 records, and likewise for sample 1.
            let batch = TrainingBatch {
                positives: vec![&data[0], &data[5]],
                negatives: vec![vec![&data[4]], vec![&data[9]]],
            };
            Ok(batch_loss(tape, p, model, &batch, 1.0)?.loss)
        }
    }
}

/// Checks one group at one seed.
pub fn check_group(group: Group, seed: u64, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let (model, data) = fixture(seed)?;
    let mask: Vec<bool> = model.params.names().iter().map(|n| group.owns(n)).collect();
    let target = mask.iter().position(|&m| m).expect("every group owns a parameter");
    grad_check_tensors(
        |tape, xs| {
            let p = Bound::from(xs.to_vec());
            let out = objective(tape, &p, &model, &data, group, seed)?;
            if !cfg.inject_fault {
                return Ok(out);
            }
            // The square is computed outside the tape, so its gradient is lost.
            let value = tape.value(xs[target]).data().iter().map(|v| v * v).sum::<f64>();
            let detached = tape.constant(Tensor::scalar(value));
            tape.add(out, detached)
        },
        model.params.tensors(),
        &mask,
        cfg.eps,
    )
}

/// Runs every group over `cfg.seeds` seeds and keeps the worst error per group.
pub fn run_suite(cfg: &SuiteConfig, mut progress: impl FnMut(Group, u64)) -> Result<Vec<GroupResult>> {
    let mut results = Vec::with_capacity(Group::ALL.len());
    for group in Group::ALL {
        let mut merged = GradCheckReport::default();
        for seed in 0..cfg.seeds {
            progress(group, seed);
            merged.merge(&check_group(group, seed, cfg)?);
        }
        results.push(GroupResult {
            group,
            max_rel_error: merged.max_rel_error,
            checked: merged.checked,
            passed: merged.max_rel_error < cfg.tol,
        });
    }
    Ok(results)
}
