//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ptrrank::audit::audit_record;
use ptrrank::model::{ModelDims, PointerModel};
use ptrrank::record::{Candidate, QueryRecord};
use ptrrank::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const AUDIT_WORDS: [&str; 8] = ["red", "car", "blue", "boat", "fast", "slow", "the", "a"];

/// A random model with weights large enough that pointer distributions are
/// far from uniform.
pub fn random_model(n_max: usize, seed: u64) -> PointerModel {
    let vocab = Vocabulary::from_words(AUDIT_WORDS, n_max);
    let dims = ModelDims {
        d: 5,
        feature_dim: 2,
        aux_text: false,
    };
    PointerModel::with_init_scale(dims, vocab, seed, 1.0)
}

pub fn random_record(n: usize, seed: u64) -> QueryRecord {
    audit_record(n, 2, seed)
}

/// Four candidates with two features each. Rank 1 goes to the largest first
/// feature; the remaining ranks follow the second feature. A one-dimensional
/// model cannot serve both orders, so it has to trade rank 1 against the tail.
pub fn tradeoff_fixture(queries: usize, seed: u64) -> Vec<QueryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..queries)
        .map(|i| {
            let xs: Vec<[f64; 2]> = (0..4).map(|_| [rng.random(), rng.random()]).collect();
            let best = (0..4)
                .max_by(|&a, &b| xs[a][0].total_cmp(&xs[b][0]))
                .unwrap();
            let mut rest: Vec<usize> = (0..4).filter(|&j| j != best).collect();
            rest.sort_by(|&a, &b| xs[b][1].total_cmp(&xs[a][1]));
            let mut sims = [0.0; 4];
            sims[best] = 1.0;
            for (k, &j) in rest.iter().enumerate() {
                sims[j] = 0.75 - 0.25 * k as f64;
            }
            QueryRecord {
                query_id: format!("t{i}"),
                question: "which".into(),
                reference: None,
                candidates: (0..4)
                    .map(|j| {
                        Candidate::new(j + 1, "answer")
                            .with_similarity(sims[j])
                            .with_features(xs[j].to_vec())
                    })
                    .collect(),
            }
        })
        .collect()
}
