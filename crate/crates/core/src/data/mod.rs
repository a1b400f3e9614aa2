//! Experience sequences, e-passages, the synthetic corpus generator and the
//! line-delimited dataset format.

mod io;
mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synth::{
    build_levels, generate_corpus, level_composition, Corpus, CorpusStats, DistractorPool, Lexicon, SynthConfig,
    BOS, SEP,
};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::tensor::Tensor;

/// How relevant an experience pair is to the sentence at its step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelevanceRank {
    Rank1,
    Rank3,
    RandomNegative,
}

/// One (image, text) experience at a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperiencePair {
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
    pub relevance_rank: RelevanceRank,
}

/// Model input: a topic and an ordered list of experiences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSequence {
    pub topic_embedding: Vec<f64>,
    pub pairs: Vec<ExperiencePair>,
}

impl ExperienceSequence {
    pub fn steps(&self) -> usize {
        self.pairs.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.topic_embedding.len()
    }

    pub fn validate(&self, steps: usize, embed_dim: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(validation("experience sequence has no steps"));
        }
        if self.pairs.len() != steps {
            return Err(validation(format!("expected {steps} experience steps, found {}", self.pairs.len())));
        }
        let dims_ok = self.topic_embedding.len() == embed_dim
            && self
                .pairs
                .iter()
                .all(|p| p.image_embedding.len() == embed_dim && p.text_embedding.len() == embed_dim);
        if !dims_ok {
            return Err(validation(format!("embedding dimension differs from {embed_dim}")));
        }
        Ok(())
    }

    /// Image embeddings as an `L x d_e` matrix.
    pub fn image_matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.pairs.iter().map(|p| p.image_embedding.clone()).collect::<Vec<_>>())
    }

    pub fn text_matrix(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.pairs.iter().map(|p| p.text_embedding.clone()).collect::<Vec<_>>())
    }

    /// The same experiences reordered so that new step `i` is old step `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.pairs.len()];
        if order.len() != self.pairs.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(validation("not a permutation of the experience steps"));
        }
        Ok(Self {
            topic_embedding: self.topic_embedding.clone(),
            pairs: order.iter().map(|&i| self.pairs[i].clone()).collect(),
        })
    }
}

/// A training or test unit: input experiences, the target passage of `L`
/// sentences (token ids, no separators) and its curriculum level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EPassage {
    pub sample_id: u64,
    pub level: u8,
    pub input: ExperienceSequence,
    pub target: Vec<Vec<u32>>,
}

impl EPassage {
    pub fn validate(&self, steps: usize, embed_dim: usize, vocab_size: usize) -> Result<()> {
        if !(1..=5).contains(&self.level) {
            return Err(validation(format!("level {} outside 1..=5", self.level)));
        }
        self.input.validate(steps, embed_dim)?;
        if self.target.len() != steps {
            return Err(validation(format!("target has {} sentences, expected {steps}", self.target.len())));
        }
        if self.target.iter().any(Vec::is_empty) {
            return Err(validation("empty target sentence"));
        }
        if let Some(bad) = self.target.iter().flatten().find(|&&t| t as usize >= vocab_size) {
            return Err(validation(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }

    pub fn ranks(&self) -> Vec<RelevanceRank> {
        self.input.pairs.iter().map(|p| p.relevance_rank).collect()
    }
}
