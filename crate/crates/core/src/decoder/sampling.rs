use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub samples_per_input: usize,
    /// Longest sentence emitted before a separator is forced.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            top_p: 0.7,
            temperature: 1.1,
            repetition_penalty: 1.5,
            samples_per_input: 10,
            max_len: 12,
            seed: 7,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(validation("top_k must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(validation("top_p must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(validation("temperature must be positive"));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(validation("repetition_penalty must be at least 1"));
        }
        if self.samples_per_input == 0 || self.max_len == 0 {
            return Err(validation("samples_per_input and max_len must be positive"));
        }
        Ok(())
    }
}

/// Turns logits into a sampling distribution: temperature, repetition
/// penalty on `history`, top-k, then nucleus, then renormalization. Tokens
/// with logit `-inf` are never kept. If nothing survives, the distribution
/// is a point mass on the raw argmax.
pub fn apply_sampling_filters(logits: &[f64], history: &[u32], cfg: &GenerationConfig) -> Vec<f64> {
    let mut z: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
    let mut penalized = vec![false; z.len()];
    for &t in history {
        if let Some(flag) = penalized.get_mut(t as usize) {
            if !*flag {
                *flag = true;
                let v = &mut z[t as usize];
                *v = if *v > 0.0 { *v / cfg.repetition_penalty } else { *v * cfg.repetition_penalty };
            }
        }
    }
    let mut order: Vec<usize> = (0..z.len()).filter(|&i| z[i].is_finite()).collect();
    if order.is_empty() {
        return point_mass(logits);
    }
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    let max = z[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (z[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut kept = 0;
    let mut cumulative = 0.0;
    for w in &weights {
        cumulative += w / total;
        kept += 1;
        if cumulative >= cfg.top_p {
            break;
        }
    }
    let mass: f64 = weights[..kept].iter().sum();
    let mut probs = vec![0.0; z.len()];
    for (&i, w) in order.iter().zip(&weights).take(kept) {
        probs[i] = w / mass;
    }
    probs
}

fn point_mass(logits: &[f64]) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    let best = (0..logits.len())
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    if let Some(p) = probs.get_mut(best) {
        *p = 1.0;
    }
    probs
}

/// Inverse-CDF draw walking tokens from most to least probable, so that a
/// shared uniform draw picks the same token under nearby distributions.
pub fn sample_from(probs: &[f64], rng: &mut Rng) -> u32 {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for &i in &order {
        cumulative += probs[i];
        if u < cumulative {
            return i as u32;
        }
    }
    order.last().copied().unwrap_or(0) as u32
}
