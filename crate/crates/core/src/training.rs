//! Contrastive training with curriculum negative sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::EPassage;
use crate::error::{validation, Error, Result};
use crate::model::Mmtg;
use crate::params::Bound;
use crate::rng::{derived, Rng, Stream};
use crate::span::{gaussian_prior, span_regularizer};
use crate::tensor::kernels::log_sigmoid;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all phases.
    pub max_steps: Option<usize>,
    pub lambda_reg: f64,
    pub curriculum_enabled: bool,
    pub neg_enabled: bool,
    pub negatives_per_positive: usize,
    /// Epochs at which phases 1 and 2 start. Defaults to thirds.
    pub phase_boundaries: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 4,
            epochs: 150,
            max_steps: None,
            lambda_reg: 1.0,
            curriculum_enabled: true,
            neg_enabled: true,
            negatives_per_positive: 1,
            phase_boundaries: None,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(validation("lr must be positive"));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(validation("lambda_reg must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(validation("batch_size and epochs must be positive"));
        }
        if self.neg_enabled && self.negatives_per_positive == 0 {
            return Err(validation("negatives_per_positive must be positive when negatives are enabled"));
        }
        let [a, b] = self.boundaries();
        if a > b || b > self.epochs {
            return Err(validation(format!(
                "phase boundaries {a}, {b} must be non-decreasing and at most {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Caps training at `steps` optimizer steps and places the phase
    /// boundaries so each curriculum phase gets about a third of them.
    pub fn with_step_budget(self, steps: usize, samples: usize) -> Self {
        let per_epoch = |positives: usize| (positives * samples).div_ceil(self.batch_size).max(1);
        let third = steps.div_ceil(3);
        let a = third.div_ceil(per_epoch(1));
        let b = a + third.div_ceil(per_epoch(2));
        Self {
            epochs: b + steps.div_ceil(per_epoch(1)),
            max_steps: Some(steps),
            phase_boundaries: Some([a, b]),
            ..self
        }
    }

    pub fn boundaries(&self) -> [usize; 2] {
        self.phase_boundaries.unwrap_or([self.epochs / 3, 2 * self.epochs / 3])
    }

    /// The phase used for `epoch`, after applying the ablation switches.
    pub fn phase_for_epoch(&self, epoch: usize) -> Result<(usize, CurriculumPhase)> {
        if !self.neg_enabled {
            return Ok((
                0,
                CurriculumPhase {
                    positive_levels: BTreeSet::from([5]),
                    negative_levels: BTreeSet::new(),
                },
            ));
        }
        if !self.curriculum_enabled {
            return Ok((2, curriculum_schedule(2)?));
        }
        let [a, b] = self.boundaries();
        let index = if epoch < a {
            0
        } else if epoch < b {
            1
        } else {
            2
        };
        Ok((index, curriculum_schedule(index)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPhase {
    pub positive_levels: BTreeSet<u8>,
    pub negative_levels: BTreeSet<u8>,
}

pub fn curriculum_schedule(phase_index: usize) -> Result<CurriculumPhase> {
    let (pos, neg): (&[u8], &[u8]) = match phase_index {
        0 => (&[5], &[1]),
        1 => (&[5, 4], &[1, 2]),
        2 => (&[5, 4], &[1, 2, 3]),
        _ => return Err(validation(format!("curriculum phase {phase_index} outside 0..=2"))),
    };
    Ok(CurriculumPhase {
        positive_levels: pos.iter().copied().collect(),
        negative_levels: neg.iter().copied().collect(),
    })
}

/// Positives with their negative inputs. Every negative shares its
/// positive's target passage.
#[derive(Clone, Debug)]
pub struct TrainingBatch<'a> {
    pub positives: Vec<&'a EPassage>,
    pub negatives: Vec<Vec<&'a EPassage>>,
}

/// Records grouped by sample and level.
pub struct LevelIndex<'a> {
    by_sample: BTreeMap<u64, BTreeMap<u8, &'a EPassage>>,
}

impl<'a> LevelIndex<'a> {
    pub fn new(dataset: &'a [EPassage]) -> Result<Self> {
        let mut by_sample: BTreeMap<u64, BTreeMap<u8, &'a EPassage>> = BTreeMap::new();
        for p in dataset {
            if by_sample.entry(p.sample_id).or_default().insert(p.level, p).is_some() {
                return Err(validation(format!("sample {} has two level-{} records", p.sample_id, p.level)));
            }
        }
        if by_sample.is_empty() {
            return Err(validation("training set is empty"));
        }
        Ok(Self { by_sample })
    }

    pub fn sample_count(&self) -> usize {
        self.by_sample.len()
    }

    fn get(&self, sample_id: u64, level: u8) -> Result<&'a EPassage> {
        self.by_sample[&sample_id]
            .get(&level)
            .copied()
            .ok_or_else(|| validation(format!("sample {sample_id} lacks a level-{level} record")))
    }
}

/// One epoch of batches for `phase`.
pub fn make_batches<'a>(
    index: &LevelIndex<'a>,
    phase: &CurriculumPhase,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<TrainingBatch<'a>>> {
    let mut positives = Vec::new();
    for &id in index.by_sample.keys() {
        for &level in &phase.positive_levels {
            positives.push(index.get(id, level)?);
        }
        for &level in &phase.negative_levels {
            index.get(id, level)?;
        }
    }
    positives.shuffle(rng);
    let negative_levels: Vec<u8> = phase.negative_levels.iter().copied().collect();
    let mut batches = Vec::with_capacity(positives.len().div_ceil(cfg.batch_size));
    for chunk in positives.chunks(cfg.batch_size) {
        let mut negatives = Vec::with_capacity(chunk.len());
        for p in chunk {
            let mut negs = Vec::new();
            if !negative_levels.is_empty() {
                for _ in 0..cfg.negatives_per_positive {
                    let level = negative_levels[rng.random_range(0..negative_levels.len())];
                    negs.push(index.get(p.sample_id, level)?);
                }
            }
            negatives.push(negs);
        }
        batches.push(TrainingBatch {
            positives: chunk.to_vec(),
            negatives,
        });
    }
    Ok(batches)
}

/// `-[ln s(f_pos) + sum ln s(1 - f_neg)]` with `s` the logistic function.
pub fn contrastive_loss(f_pos: f64, f_negs: &[f64]) -> f64 {
    -(log_sigmoid(f_pos) + f_negs.iter().map(|f| log_sigmoid(1.0 - f)).sum::<f64>())
}

/// Loss graph of one batch.
pub struct BatchLoss {
    pub loss: Var,
    pub contrastive: f64,
    pub l_d: f64,
    pub f_pos_mean: f64,
    pub f_neg_mean: Option<f64>,
    pub negative_forwards: usize,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

/// Mean contrastive loss plus `lambda_reg` times the mean regularizer over positives.
pub fn batch_loss(tape: &mut Tape, p: &Bound, model: &Mmtg, batch: &TrainingBatch, lambda_reg: f64) -> Result<BatchLoss> {
    if batch.positives.is_empty() {
        return Err(validation("empty batch"));
    }
    if batch.negatives.len() != batch.positives.len() {
        return Err(validation("every positive needs a (possibly empty) negative list"));
    }
    let use_reg = !model.config.ablations.no_span_attention;
    let prior = gaussian_prior(model.config.steps);
    let (mut terms, mut regs) = (Vec::new(), Vec::new());
    let (mut f_pos_sum, mut f_neg_sum, mut negative_forwards) = (0.0, 0.0, 0usize);
    for (pos, negs) in batch.positives.iter().zip(&batch.negatives) {
        let (out, enc) = model.forward(tape, p, &pos.input, &pos.target)?;
        let f_pos = tape.mean(out.target_log_probs);
        f_pos_sum += tape.value(f_pos).data()[0];
        let mut term = tape.log_sigmoid(f_pos);
        for neg in negs {
            if neg.target != pos.target || neg.sample_id != pos.sample_id {
                return Err(validation("a negative must share its positive's sample and target"));
            }
            let (out, _) = model.forward(tape, p, &neg.input, &neg.target)?;
            negative_forwards += 1;
            let f_neg = tape.mean(out.target_log_probs);
            f_neg_sum += tape.value(f_neg).data()[0];
            let margin = tape.affine(f_neg, -1.0, 1.0);
            let ls = tape.log_sigmoid(margin);
            term = tape.add(term, ls)?;
        }
        terms.push(tape.scale(term, -1.0));
        if use_reg {
            regs.push(span_regularizer(tape, enc.image_span.alpha, enc.text_span.alpha, &prior)?);
        }
    }
    let contrastive = mean_of(tape, &terms)?;
    let contrastive_value = tape.value(contrastive).data()[0];
    let (loss, l_d) = if regs.is_empty() {
        (contrastive, 0.0)
    } else {
        let reg = mean_of(tape, &regs)?;
        let l_d = tape.value(reg).data()[0];
        let weighted = tape.scale(reg, lambda_reg);
        (tape.add(contrastive, weighted)?, l_d)
    };
    Ok(BatchLoss {
        loss,
        contrastive: contrastive_value,
        l_d,
        f_pos_mean: f_pos_sum / batch.positives.len() as f64,
        f_neg_mean: (negative_forwards > 0).then(|| f_neg_sum / negative_forwards as f64),
        negative_forwards,
    })
}

/// Value of [`batch_loss`] at the model's current parameters.
pub fn total_loss(model: &Mmtg, batch: &TrainingBatch, lambda_reg: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind_frozen(&mut tape);
    let l = batch_loss(&mut tape, &p, model, batch, lambda_reg)?;
    Ok(tape.value(l.loss).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub phase: usize,
    pub loss: f64,
    pub l_d: f64,
    pub f_pos_mean: f64,
    pub f_neg_mean: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub trace: Vec<TraceRecord>,
    pub steps: usize,
    pub negative_forwards: usize,
    pub levels_seen: BTreeSet<u8>,
}

pub fn write_trace<W: Write>(mut w: W, trace: &[TraceRecord]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains `model` in place. `on_step` sees every trace record as it is made.
pub fn train(
    dataset: &[EPassage],
    model: &mut Mmtg,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TraceRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    for p in dataset {
        model.check_passage(p)?;
    }
    let index = LevelIndex::new(dataset)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let mut report = TrainReport::default();
    'epochs: for epoch in 0..cfg.epochs {
        let (phase_index, phase) = cfg.phase_for_epoch(epoch)?;
        let mut rng = derived(cfg.seed, Stream::Batches, epoch as u64);
        for batch in make_batches(&index, &phase, cfg, &mut rng)? {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                break 'epochs;
            }
            report
                .levels_seen
                .extend(batch.positives.iter().chain(batch.negatives.iter().flatten()).map(|p| p.level));
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let l = batch_loss(&mut tape, &bound, model, &batch, cfg.lambda_reg)?;
            let loss = tape.value(l.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step: report.steps,
                    detail: format!("loss {loss} in phase {phase_index}, f_pos mean {}", l.f_pos_mean),
                });
            }
            let grads: Vec<Tensor> = bound.gradients(&tape.backward(l.loss)?);
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: report.steps,
                    detail: format!("non-finite gradient for {}", model.params.names()[bad]),
                });
            }
            adam.step(model.params.tensors_mut(), &grads)?;
            report.negative_forwards += l.negative_forwards;
            let record = TraceRecord {
                step: report.steps,
                phase: phase_index,
                loss,
                l_d: l.l_d,
                f_pos_mean: l.f_pos_mean,
                f_neg_mean: l.f_neg_mean,
            };
            on_step(&record);
            report.trace.push(record);
            report.steps += 1;
        }
    }
    Ok(report)
}
