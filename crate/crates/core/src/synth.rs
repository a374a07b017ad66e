//! Synthetic candidate pools with a known quality ordering.
//!
//! Each candidate gets a feature vector `x ~ N(0, I)` and a latent quality
//! `⟨w*, x⟩ + noise`, where `w*` is the same for every corpus of a given
//! feature dimension. Qualities are min-max rescaled per query into the
//! candidates' precomputed similarities. Candidate text names the quartile
//! bucket of each feature, and the reference names the best bucket per
//! feature, so lexical similarity also tracks quality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::record::{Candidate, QueryRecord};

const HIDDEN_WEIGHT_SEED: u64 = 0x5EED_1DEA;
const QUARTILES: [f64; 3] = [-0.674_489_750_196_081_7, 0.0, 0.674_489_750_196_081_7];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_queries: 100,
            n_candidates: 4,
            feature_dim: 4,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// The hidden scoring direction for `feature_dim` features.
pub fn hidden_weights(feature_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(HIDDEN_WEIGHT_SEED);
    (0..feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

fn bucket(x: f64) -> usize {
    QUARTILES.iter().filter(|&&q| x >= q).count()
}

fn render(features: &[f64]) -> String {
    features
        .iter()
        .enumerate()
        .map(|(j, &x)| format!("f{j}b{}", bucket(x)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<QueryRecord>> {
    if spec.n_candidates == 0 || spec.feature_dim == 0 {
        return Err(Error::Config(
            "synthetic corpora need at least one candidate and one feature".into(),
        ));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be a non-negative number, got {}",
            spec.noise_sigma
        )));
    }
    let w = hidden_weights(spec.feature_dim);
    let reference = w
        .iter()
        .enumerate()
        .map(|(j, &wj)| format!("f{j}b{}", if wj >= 0.0 { 3 } else { 0 }))
        .collect::<Vec<_>>()
        .join(" ");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity(spec.n_queries);
    for q in 0..spec.n_queries {
        let mut feats = Vec::with_capacity(spec.n_candidates);
        let mut quality = Vec::with_capacity(spec.n_candidates);
        for _ in 0..spec.n_candidates {
            let x: Vec<f64> = (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            let latent: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            quality.push(latent + spec.noise_sigma * noise);
            feats.push(x);
        }
        let lo = quality.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = quality.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let candidates = feats
            .into_iter()
            .zip(&quality)
            .enumerate()
            .map(|(i, (x, &qm))| {
                let sim = if hi > lo { (qm - lo) / (hi - lo) } else { 1.0 };
                Candidate::new(i + 1, render(&x))
                    .with_similarity(sim)
                    .with_features(x)
            })
            .collect();
        corpus.push(QueryRecord {
            query_id: format!("s{}-q{:05}", spec.seed, q),
            question: format!("which answer fits clip {}", q % 10),
            reference: Some(reference.clone()),
            candidates,
        });
    }
    Ok(corpus)
}
