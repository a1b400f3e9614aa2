//! BLEU, Distinct and New N-grams Rate, plus the paired-seed evaluation
//! harness. N-grams are taken per sentence and never span a boundary.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::EPassage;
use crate::decoder::GenerationConfig;
use crate::error::{validation, Result};
use crate::model::Mmtg;
use crate::rng::{derived, Stream};

/// Multiset of n-grams over a collection of token sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NgramSet {
    pub n: usize,
    pub counts: HashMap<Vec<u32>, usize>,
}

impl NgramSet {
    pub fn of<T: AsRef<[u32]>>(texts: &[T], n: usize) -> Self {
        let mut counts = HashMap::new();
        if n > 0 {
            for t in texts {
                for g in t.as_ref().windows(n) {
                    *counts.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Self { n, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn unique(&self) -> HashSet<&[u32]> {
        self.counts.keys().map(Vec::as_slice).collect()
    }
}

/// Sentence-level BLEU with uniform weights up to order `n`, clipped counts
/// and brevity penalty. Zero when any order has no candidate n-grams or no
/// matches.
pub fn bleu_n<R: AsRef<[u32]>>(candidate: &[u32], references: &[R], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(validation("BLEU order must be at least 1"));
    }
    if references.is_empty() {
        return Err(validation("BLEU needs a reference"));
    }
    if candidate.len() < n {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = NgramSet::of(&[candidate], order);
        let mut max_ref: HashMap<&[u32], usize> = HashMap::new();
        let ref_sets: Vec<NgramSet> = references.iter().map(|r| NgramSet::of(&[r.as_ref()], order)).collect();
        for set in &ref_sets {
            for (g, &c) in &set.counts {
                let e = max_ref.entry(g.as_slice()).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand
            .counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g.as_slice()).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / cand.total() as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * (log_sum / n as f64).exp()).clamp(0.0, 1.0))
}

/// Unique n-grams over total n-grams across the collection.
pub fn distinct_n<T: AsRef<[u32]>>(texts: &[T], n: usize) -> Result<f64> {
    let set = NgramSet::of(texts, n);
    let total = set.total();
    if total == 0 {
        return Err(validation(format!("no {n}-grams to measure")));
    }
    Ok(set.counts.len() as f64 / total as f64)
}

/// `|uniq(Y) \ uniq(X)| / |uniq(X) ∪ uniq(Y)|`: the share of n-grams that
/// only the disordered outputs `y` produce.
pub fn nnr<T: AsRef<[u32]>>(x: &[T], y: &[T], n: usize) -> Result<f64> {
    let (sx, sy) = (NgramSet::of(x, n), NgramSet::of(y, n));
    let (ux, uy) = (sx.unique(), sy.unique());
    let union = ux.union(&uy).count();
    if union == 0 {
        return Err(validation(format!("no {n}-grams in either collection")));
    }
    Ok(uy.difference(&ux).count() as f64 / union as f64)
}

/// How evaluation disorders an experience sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disorder {
    /// Step `j` takes the pair from step `j + 1`, wrapping around.
    Rotate,
    /// A seeded uniformly random derangement per sample.
    Shuffle { seed: u64 },
}

impl Disorder {
    pub fn order(&self, steps: usize, sample_id: u64) -> Result<Vec<usize>> {
        if steps < 2 {
            return Err(validation("disordering needs at least two steps"));
        }
        match *self {
            Disorder::Rotate => Ok((0..steps).map(|j| (j + 1) % steps).collect()),
            Disorder::Shuffle { seed } => {
                let mut rng = derived(seed, Stream::Permutation, sample_id);
                let mut order: Vec<usize> = (0..steps).collect();
                loop {
                    order.shuffle(&mut rng);
                    if order.iter().enumerate().all(|(i, &j)| i != j) {
                        return Ok(order);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: u64,
    pub bleu2: f64,
    pub distinct2: f64,
    pub nnr1: f64,
    pub nnr2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu2: f64,
    pub distinct2: f64,
    pub nnr1: f64,
    pub nnr2: f64,
    pub samples_per_input: usize,
    pub seed: u64,
    pub disorder: Disorder,
    pub per_sample: Vec<SampleReport>,
}

impl EvalReport {
    /// Fixed-width table with one header row and one value row.
    pub fn table(&self, label: &str) -> String {
        let mut s = String::new();
        let w = label.len().max(5);
        writeln!(s, "{:<w$}  {:>6}  {:>7}  {:>6}  {:>6}", "Model", "B.-2", "Dist.-2", "NNR-1", "NNR-2").unwrap();
        writeln!(
            s,
            "{:<w$}  {:>6.4}  {:>7.4}  {:>6.4}  {:>6.4}",
            label, self.bleu2, self.distinct2, self.nnr1, self.nnr2
        )
        .unwrap();
        s
    }
}

/// Generation stream for one sample. Ordered and disordered runs share it.
pub fn paired_rng(seed: u64, sample_id: u64, draw: usize) -> crate::rng::Rng {
    derived(seed, Stream::Generation, (sample_id << 16) | draw as u64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Generates `samples_per_input` passages per test input from the ordered
/// and disordered sequences and scores them.
pub fn evaluate(model: &Mmtg, testset: &[EPassage], cfg: &GenerationConfig, disorder: Disorder) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(validation("evaluation needs at least one test passage"));
    }
    cfg.validate()?;
    let mut per_sample = Vec::with_capacity(testset.len());
    for p in testset {
        model.check_passage(p)?;
        let shuffled = p.input.permuted(&disorder.order(p.input.steps(), p.sample_id)?)?;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        let mut bleu = Vec::with_capacity(cfg.samples_per_input);
        for draw in 0..cfg.samples_per_input {
            let ordered = model.generate(&p.input, cfg, &mut paired_rng(cfg.seed, p.sample_id, draw))?;
            let disordered = model.generate(&shuffled, cfg, &mut paired_rng(cfg.seed, p.sample_id, draw))?;
            let scores = ordered
                .iter()
                .zip(&p.target)
                .map(|(c, r)| bleu_n(c, std::slice::from_ref(r), 2))
                .collect::<Result<Vec<_>>>()?;
            bleu.push(mean(scores.into_iter()));
            x.extend(ordered);
            y.extend(disordered);
        }
        per_sample.push(SampleReport {
            sample_id: p.sample_id,
            bleu2: mean(bleu.into_iter()),
            distinct2: distinct_n(&x, 2).unwrap_or(0.0),
            nnr1: nnr(&x, &y, 1)?,
            nnr2: nnr(&x, &y, 2).unwrap_or(0.0),
        });
    }
    Ok(EvalReport {
        bleu2: mean(per_sample.iter().map(|s| s.bleu2)),
        distinct2: mean(per_sample.iter().map(|s| s.distinct2)),
        nnr1: mean(per_sample.iter().map(|s| s.nnr1)),
        nnr2: mean(per_sample.iter().map(|s| s.nnr2)),
        samples_per_input: cfg.samples_per_input,
        seed: cfg.seed,
        disorder,
        per_sample,
    })
}
