use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{ExperiencePair, ExperienceSequence, RelevanceRank};
use crate::error::{validation, Error, Result};
use crate::rng::{derived, Rng, Stream};

/// Largest cosine similarity allowed between two prototypes.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.9;

/// Weight of the modality-specific offset that separates the image and text
/// views of one concept.
const VIEW_OFFSET: f64 = 0.5;

/// Deterministic stand-in for a pretrained image/text encoder.
///
/// Every concept owns a unit prototype plus distinct image and text views
/// (the prototype nudged by a modality-specific offset). Topics own their own
/// prototype table. All outputs are unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProvider {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    image_views: Vec<Vec<f64>>,
    text_views: Vec<Vec<f64>>,
    topics: Vec<Vec<f64>>,
}

pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_table(rng: &mut Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut table: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while table.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(validation(format!(
                "cannot place {count} prototypes in {dim} dimensions below cosine {MAX_PROTOTYPE_COSINE}"
            )));
        }
        let v = normalize(gaussian(rng, dim));
        if table.iter().all(|p| cosine(p, &v) < MAX_PROTOTYPE_COSINE) {
            table.push(v);
        }
    }
    Ok(table)
}

impl EmbeddingProvider {
    pub fn generate(n_concepts: usize, n_topics: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_concepts == 0 || n_topics == 0 || dim < 2 {
            return Err(validation("provider needs concepts, topics and dimension >= 2"));
        }
        let mut rng = derived(seed, Stream::Provider, 0);
        let prototypes = unit_table(&mut rng, n_concepts, dim)?;
        let topics = unit_table(&mut rng, n_topics, dim)?;
        let mut view = |p: &Vec<f64>| {
            let offset = normalize(gaussian(&mut rng, dim));
            normalize(p.iter().zip(&offset).map(|(a, b)| a + VIEW_OFFSET * b).collect())
        };
        let image_views = prototypes.iter().map(&mut view).collect();
        let text_views = prototypes.iter().map(&mut view).collect();
        Ok(Self {
            dim,
            prototypes,
            image_views,
            text_views,
            topics,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn concept_count(&self) -> usize {
        self.prototypes.len()
    }

    pub fn topic_count(&self) -> usize {
        self.topics.len()
    }

    pub fn prototype(&self, concept: usize) -> Result<&[f64]> {
        self.prototypes
            .get(concept)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown concept id {concept}")))
    }

    pub fn topic_embedding(&self, topic: usize) -> Result<Vec<f64>> {
        self.topics
            .get(topic)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("unknown topic id {topic}")))
    }

    fn view(&self, table: &[Vec<f64>], concepts: &[usize], jitter: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        if concepts.is_empty() {
            return Err(validation("a step needs at least one concept"));
        }
        let mut acc = vec![0.0; self.dim];
        for &c in concepts {
            let v = table
                .get(c)
                .ok_or_else(|| Error::Lookup(format!("unknown concept id {c}")))?;
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        Ok(jittered(normalize(acc), jitter, rng))
    }

    /// Image embedding of a step showing `concepts`, with Gaussian jitter of
    /// total standard deviation `jitter` (per component `jitter / sqrt(d)`).
    pub fn image_embedding(&self, concepts: &[usize], jitter: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        self.view(&self.image_views, concepts, jitter, rng)
    }

    pub fn text_embedding(&self, concepts: &[usize], jitter: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        self.view(&self.text_views, concepts, jitter, rng)
    }

    /// Embeds a topic and one concept list per step into an experience sequence
    /// of Rank1 pairs.
    pub fn embed(&self, topic: usize, steps: &[Vec<usize>], jitter: f64, rng: &mut Rng) -> Result<ExperienceSequence> {
        let topic_embedding = self.topic_embedding(topic)?;
        let pairs = steps
            .iter()
            .map(|concepts| {
                Ok(ExperiencePair {
                    image_embedding: self.image_embedding(concepts, jitter, rng)?,
                    text_embedding: self.text_embedding(concepts, jitter, rng)?,
                    relevance_rank: RelevanceRank::Rank1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperienceSequence { topic_embedding, pairs })
    }

    /// Wraps externally supplied vectors, normalizing each to unit length.
    pub fn embed_vectors(&self, topic: Vec<f64>, image: Vec<Vec<f64>>, text: Vec<Vec<f64>>) -> Result<ExperienceSequence> {
        if image.len() != text.len() {
            return Err(validation("image and text sequences differ in length"));
        }
        let check = |v: &Vec<f64>| -> Result<()> {
            if v.len() != self.dim || v.iter().all(|x| *x == 0.0) || v.iter().any(|x| !x.is_finite()) {
                return Err(validation(format!("expected a finite non-zero vector of dimension {}", self.dim)));
            }
            Ok(())
        };
        check(&topic)?;
        image.iter().chain(&text).try_for_each(check)?;
        Ok(ExperienceSequence {
            topic_embedding: normalize(topic),
            pairs: image
                .into_iter()
                .zip(text)
                .map(|(i, t)| ExperiencePair {
                    image_embedding: normalize(i),
                    text_embedding: normalize(t),
                    relevance_rank: RelevanceRank::Rank1,
                })
                .collect(),
        })
    }

    /// Nearest concept prototype by cosine similarity.
    pub fn decode_concept(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.prototypes.iter().enumerate() {
            let c = cosine(p, v);
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }
}

/// Adds isotropic Gaussian noise of total norm scale `jitter` and renormalizes.
pub fn jittered(v: Vec<f64>, jitter: f64, rng: &mut Rng) -> Vec<f64> {
    if jitter == 0.0 {
        return v;
    }
    let per = jitter / (v.len() as f64).sqrt();
    normalize(v.iter().map(|x| x + per * rng.sample::<f64, _>(StandardNormal)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn provider() -> EmbeddingProvider {
        EmbeddingProvider::generate(64, 8, 32, 11).unwrap()
    }

    #[test]
    fn same_concept_without_jitter_is_identical() {
        let p = provider();
        let mut rng = Rng::seed_from_u64(0);
        let a = p.image_embedding(&[3], 0.0, &mut rng).unwrap();
        let b = p.image_embedding(&[3], 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = provider();
        let mut rng = Rng::seed_from_u64(1);
        for c in 0..64 {
            for jitter in [0.0, 0.1, 0.9] {
                for v in [
                    p.image_embedding(&[c], jitter, &mut rng).unwrap(),
                    p.text_embedding(&[c, (c + 1) % 64], jitter, &mut rng).unwrap(),
                ] {
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn distinct_prototypes_are_not_collinear() {
        let p = provider();
        for i in 0..p.concept_count() {
            for j in 0..i {
                let c = cosine(p.prototype(i).unwrap(), p.prototype(j).unwrap());
                assert!(c < 0.9, "concepts {i} and {j}: {c}");
            }
        }
    }

    #[test]
    fn unknown_ids_are_lookup_errors() {
        let p = provider();
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(p.image_embedding(&[64], 0.0, &mut rng), Err(Error::Lookup(_))));
        assert!(matches!(p.topic_embedding(8), Err(Error::Lookup(_))));
    }

    #[test]
    fn views_differ_but_decode_to_their_concept() {
        let p = provider();
        let mut rng = Rng::seed_from_u64(0);
        for c in 0..p.concept_count() {
            let img = p.image_embedding(&[c], 0.0, &mut rng).unwrap();
            let txt = p.text_embedding(&[c], 0.0, &mut rng).unwrap();
            assert_ne!(img, txt);
            assert_eq!(p.decode_concept(&img), c);
            assert_eq!(p.decode_concept(&txt), c);
        }
    }

    #[test]
    fn embed_vectors_normalizes_and_validates() {
        let p = provider();
        let v = vec![2.0; 32];
        let seq = p.embed_vectors(v.clone(), vec![v.clone()], vec![v.clone()]).unwrap();
        let n: f64 = seq.topic_embedding.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(p.embed_vectors(vec![1.0; 3], vec![], vec![]).is_err());
        assert!(p.embed_vectors(v.clone(), vec![v.clone()], vec![]).is_err());
    }
}
