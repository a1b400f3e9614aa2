use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EPassage, ExperiencePair, RelevanceRank};
use crate::encoder::{jittered, EmbeddingProvider};
use crate::error::{validation, Error, Result};
use crate::rng::{derived, Rng, Stream};

/// Sentence-start token.
pub const BOS: u32 = 0;
/// Sentence separator, also the end-of-sentence target.
pub const SEP: u32 = 1;
const FIRST_MARKER: u32 = 2;

/// Rank3 pairs carry this multiple of the Rank1 jitter.
const RANK3_JITTER_FACTOR: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub steps: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_passages: usize,
    pub test_passages: usize,
    pub sentence_len: usize,
    pub n_concepts: usize,
    pub n_topics: usize,
    pub topic_words: usize,
    pub concepts_per_step: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            vocab_size: 512,
            embed_dim: 64,
            n_passages: 32,
            test_passages: 10,
            sentence_len: 8,
            n_concepts: 128,
            n_topics: 16,
            topic_words: 12,
            concepts_per_step: 1,
            noise_std: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("steps", self.steps),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_passages", self.n_passages),
            ("sentence_len", self.sentence_len),
            ("n_concepts", self.n_concepts),
            ("n_topics", self.n_topics),
            ("topic_words", self.topic_words),
            ("concepts_per_step", self.concepts_per_step),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(validation(format!("{name} must be positive")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(validation("noise_std must be a finite non-negative number"));
        }
        if self.embed_dim < 2 {
            return Err(validation("embed_dim must be at least 2"));
        }
        if self.steps * self.concepts_per_step > self.n_concepts {
            return Err(validation(format!(
                "{} concepts cannot fill {} steps of {} distinct concepts",
                self.n_concepts, self.steps, self.concepts_per_step
            )));
        }
        let block = self.concepts_per_step * self.steps.min(3);
        if block > self.sentence_len {
            return Err(validation(format!(
                "sentence_len {} cannot hold {block} marker tokens",
                self.sentence_len
            )));
        }
        let needed = Lexicon::required_vocab(self);
        if needed > self.vocab_size {
            return Err(validation(format!(
                "vocab_size {} is too small to host concept markers and topic words (needs {needed})",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Token layout: specials, one marker per concept, then a pool of words per
/// topic. Each topic fixes a filler template for every sentence position.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    n_concepts: usize,
    vocab_size: usize,
    templates: Vec<Vec<Vec<u32>>>,
}

impl Lexicon {
    fn required_vocab(cfg: &SynthConfig) -> usize {
        FIRST_MARKER as usize + cfg.n_concepts + cfg.n_topics * cfg.topic_words
    }

    pub fn generate(cfg: &SynthConfig) -> Self {
        let mut rng = derived(cfg.seed, Stream::Lexicon, 0);
        let first_word = FIRST_MARKER as usize + cfg.n_concepts;
        let templates = (0..cfg.n_topics)
            .map(|topic| {
                let base = first_word + topic * cfg.topic_words;
                (0..cfg.steps)
                    .map(|_| {
                        (0..cfg.sentence_len)
                            .map(|_| (base + rng.random_range(0..cfg.topic_words)) as u32)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            n_concepts: cfg.n_concepts,
            vocab_size: cfg.vocab_size,
            templates,
        }
    }

    pub fn marker(&self, concept: usize) -> u32 {
        FIRST_MARKER + concept as u32
    }

    /// The concept a token marks, if it is a marker.
    pub fn concept_of(&self, token: u32) -> Option<usize> {
        let c = token.checked_sub(FIRST_MARKER)? as usize;
        (c < self.n_concepts).then_some(c)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Builds sentence `k` (0-based): the topic template with a contiguous
    /// block of markers for steps `k-1`, `k`, `k+1` (clipped) placed after the
    /// first two slots.
    pub fn sentence(&self, topic: usize, k: usize, step_concepts: &[Vec<usize>]) -> Vec<u32> {
        let mut out = self.templates[topic][k].clone();
        let lo = k.saturating_sub(1);
        let hi = (k + 1).min(step_concepts.len() - 1);
        let block: Vec<u32> = step_concepts[lo..=hi]
            .iter()
            .flatten()
            .map(|&c| self.marker(c))
            .collect();
        let start = 2.min(out.len() - block.len());
        out[start..start + block.len()].copy_from_slice(&block);
        out
    }
}

/// Hidden generating factors of one passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassageLatent {
    pub sample_id: u64,
    pub topic: usize,
    pub concepts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: SynthConfig,
    pub provider: EmbeddingProvider,
    pub lexicon: Lexicon,
    /// Level-5 training passages, sample ids `0..n_passages`.
    pub train: Vec<EPassage>,
    /// Level-5 held-out passages, sample ids continue after the training split.
    pub test: Vec<EPassage>,
    pub latents: Vec<PassageLatent>,
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let provider = EmbeddingProvider::generate(cfg.n_concepts, cfg.n_topics, cfg.embed_dim, cfg.seed)?;
    let lexicon = Lexicon::generate(cfg);
    let total = cfg.n_passages + cfg.test_passages;
    let mut passages = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let mut rng = derived(cfg.seed, Stream::Passage, id);
        let topic = rng.random_range(0..cfg.n_topics);
        let mut pool: Vec<usize> = (0..cfg.n_concepts).collect();
        pool.shuffle(&mut rng);
        let concepts: Vec<Vec<usize>> = pool[..cfg.steps * cfg.concepts_per_step]
            .chunks(cfg.concepts_per_step)
            .map(<[usize]>::to_vec)
            .collect();
        let input = provider.embed(topic, &concepts, cfg.noise_std, &mut rng)?;
        let target = (0..cfg.steps).map(|k| lexicon.sentence(topic, k, &concepts)).collect();
        passages.push(EPassage {
            sample_id: id,
            level: 5,
            input,
            target,
        });
        latents.push(PassageLatent {
            sample_id: id,
            topic,
            concepts,
        });
    }
    let test = passages.split_off(cfg.n_passages);
    Ok(Corpus {
        config: cfg.clone(),
        provider,
        lexicon,
        train: passages,
        test,
        latents,
    })
}

impl Corpus {
    /// All five levels of every training passage, `5 * n_passages` records.
    pub fn leveled_train(&self) -> Result<Vec<EPassage>> {
        let pool = DistractorPool::from_passages(&self.train);
        let mut out = Vec::with_capacity(self.train.len() * 5);
        for p in &self.train {
            let mut rng = derived(self.config.seed, Stream::Levels, p.sample_id);
            out.extend(build_levels(p, &pool, self.config.noise_std, &mut rng)?);
        }
        Ok(out)
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(&self.train, &self.test, self.config.vocab_size)
    }
}

/// Experience pairs from Level-5 passages, used as random negatives.
#[derive(Clone, Debug, Default)]
pub struct DistractorPool {
    entries: Vec<(u64, ExperiencePair)>,
}

impl DistractorPool {
    pub fn from_passages(passages: &[EPassage]) -> Self {
        let entries = passages
            .iter()
            .filter(|p| p.level == 5)
            .flat_map(|p| p.input.pairs.iter().map(move |pair| (p.sample_id, pair.clone())))
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Uniform draw of a pair that does not belong to `exclude`.
    pub fn draw(&self, exclude: u64, rng: &mut Rng) -> Result<ExperiencePair> {
        let eligible = self.entries.iter().filter(|(id, _)| *id != exclude).count();
        if eligible == 0 {
            return Err(Error::Sampling(format!(
                "distractor pool has no pairs outside sample {exclude}"
            )));
        }
        let pick = rng.random_range(0..eligible);
        let (_, pair) = self
            .entries
            .iter()
            .filter(|(id, _)| *id != exclude)
            .nth(pick)
            .expect("index below eligible count");
        let mut pair = pair.clone();
        pair.relevance_rank = RelevanceRank::RandomNegative;
        Ok(pair)
    }
}

/// `(Rank1, Rank3, negative)` counts of a level for a sequence of `steps` pairs.
pub fn level_composition(level: u8, steps: usize) -> Result<(usize, usize, usize)> {
    if steps < 2 {
        return Err(validation("levels need at least two steps"));
    }
    Ok(match level {
        5 => (steps, 0, 0),
        4 => (steps - 2, 1, 1),
        3 => (0, steps, 0),
        2 => (1, 1, steps - 2),
        1 => (0, 0, steps),
        _ => return Err(validation(format!("level {level} outside 1..=5"))),
    })
}

/// Derives levels 5 down to 1 from a Level-5 passage. Rank3 pairs keep the
/// step's concept with tripled jitter; negatives come from other samples.
pub fn build_levels(p: &EPassage, pool: &DistractorPool, noise_std: f64, rng: &mut Rng) -> Result<Vec<EPassage>> {
    if p.level != 5 || p.ranks().iter().any(|r| *r != RelevanceRank::Rank1) {
        return Err(validation(format!("sample {} is not a Level-5 passage", p.sample_id)));
    }
    let steps = p.input.steps();
    // Rank1 already carries `noise_std`; the extra jitter brings the total to
    // RANK3_JITTER_FACTOR times that.
    let extra = noise_std * (RANK3_JITTER_FACTOR * RANK3_JITTER_FACTOR - 1.0).sqrt();
    let mut out = Vec::with_capacity(5);
    for level in (1..=5u8).rev() {
        let (r1, r3, _) = level_composition(level, steps)?;
        let mut ranks: Vec<RelevanceRank> = std::iter::repeat_n(RelevanceRank::Rank1, r1)
            .chain(std::iter::repeat_n(RelevanceRank::Rank3, r3))
            .chain(std::iter::repeat_n(RelevanceRank::RandomNegative, steps - r1 - r3))
            .collect();
        ranks.shuffle(rng);
        let mut input = p.input.clone();
        for (pair, rank) in input.pairs.iter_mut().zip(ranks) {
            match rank {
                RelevanceRank::Rank1 => {}
                RelevanceRank::Rank3 => {
                    pair.image_embedding = jittered(std::mem::take(&mut pair.image_embedding), extra, rng);
                    pair.text_embedding = jittered(std::mem::take(&mut pair.text_embedding), extra, rng);
                    pair.relevance_rank = RelevanceRank::Rank3;
                }
                RelevanceRank::RandomNegative => *pair = pool.draw(p.sample_id, rng)?,
            }
        }
        out.push(EPassage {
            sample_id: p.sample_id,
            level,
            input,
            target: p.target.clone(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train_passages: usize,
    pub test_passages: usize,
    pub leveled_samples: usize,
    pub steps: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub distinct_tokens: usize,
    pub vocab_size: usize,
    pub mean_sentence_len: f64,
}

impl CorpusStats {
    pub fn of(train: &[EPassage], test: &[EPassage], vocab_size: usize) -> Self {
        let all = || train.iter().chain(test);
        let sentences = all().map(|p| p.target.len()).sum::<usize>();
        let tokens = all().flat_map(|p| &p.target).map(Vec::len).sum::<usize>();
        let mut seen = vec![false; vocab_size];
        all().flat_map(|p| p.target.iter().flatten()).for_each(|&t| {
            if let Some(s) = seen.get_mut(t as usize) {
                *s = true;
            }
        });
        Self {
            train_passages: train.len(),
            test_passages: test.len(),
            leveled_samples: 5 * train.len(),
            steps: train.first().or(test.first()).map_or(0, |p| p.input.steps()),
            sentences,
            tokens,
            distinct_tokens: seen.iter().filter(|s| **s).count(),
            vocab_size,
            mean_sentence_len: if sentences == 0 { 0.0 } else { tokens as f64 / sentences as f64 },
        }
    }

    pub fn table(&self) -> String {
        let rows = [
            ("# of e-passages (train)", self.train_passages.to_string()),
            ("# of e-passages (test)", self.test_passages.to_string()),
            ("# of leveled samples", self.leveled_samples.to_string()),
            ("steps per e-passage", self.steps.to_string()),
            ("# of sentences", self.sentences.to_string()),
            ("# of tokens", self.tokens.to_string()),
            ("distinct tokens / vocab", format!("{} / {}", self.distinct_tokens, self.vocab_size)),
            ("avg. sentence length", format!("{:.2}", self.mean_sentence_len)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>12}\n"))
            .collect()
    }
}
