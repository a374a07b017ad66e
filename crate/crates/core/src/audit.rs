//! Finite-difference audits of the loss gradient and the model's backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{grad_check, relative_error, sequence_loss, RankWeights, REL_ERR_FLOOR};
use crate::model::{ModelDims, PointerModel};
use crate::record::{Candidate, QueryRecord};
use crate::target::{build_rank_target, RankTarget, SimilarityScorer};
use crate::vocab::{Layout, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub max_rel_err: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

/// Checks ∂L_total/∂z against central differences on `instances` random
/// targets with 2 to 5 candidates. Every other instance carries a few text
/// steps so the full-vocabulary branch is covered too.
pub fn logit_audit(instances: usize, epsilon: f64, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::new(5, 3);
    let mut out = AuditReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coordinates: 0,
    };
    for i in 0..instances {
        let n = rng.random_range(2..=5);
        let mut perm: Vec<usize> = (1..=n).collect();
        perm.shuffle(&mut rng);
        let mut target =
            RankTarget::from_permutation(perm, vec![0.0; n], &RankWeights::default(), layout)?;
        if i % 2 == 1 {
            let words: Vec<usize> = (0..3).map(|_| rng.random_range(0..layout.n_text)).collect();
            target = target.with_text_prefix(&words);
        }
        let r = grad_check(&target, 1, epsilon, rng.random())?;
        out.coordinates += r.coordinates;
        if r.max_rel_err > out.max_rel_err || out.worst.is_empty() {
            out.max_rel_err = out.max_rel_err.max(r.max_rel_err);
            out.worst = format!(
                "instance {i} (N={n}), row {}, column {}",
                r.worst.1, r.worst.2
            );
        }
    }
    Ok(out)
}

/// A small fixed record with text, question words and features.
pub fn audit_record(n: usize, feature_dim: usize, seed: u64) -> QueryRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = ["red", "car", "blue", "boat", "fast", "slow", "the", "a"];
    let mut text = |len: usize| {
        (0..len)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let candidates = (1..=n)
        .map(|id| Candidate::new(id, text(3)))
        .collect::<Vec<_>>();
    let question = text(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let candidates = candidates
        .into_iter()
        .map(|c| {
            let f = (0..feature_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let s = rng.random_range(0.0..1.0);
            c.with_features(f).with_similarity(s)
        })
        .collect();
    QueryRecord {
        query_id: format!("audit-{seed}"),
        question,
        reference: None,
        candidates,
    }
}

/// Central-difference gradient of the sequence loss with respect to every parameter.
pub fn numeric_param_grad(
    model: &PointerModel,
    record: &QueryRecord,
    target: &RankTarget,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut out = vec![0.0; model.params().len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let plus = sequence_loss(&probe.forward(record, target)?, target)?.total;
        probe.params_mut()[i] = orig - epsilon;
        let minus = sequence_loss(&probe.forward(record, target)?, target)?.total;
        probe.params_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

/// Checks the model's backward pass against central differences on one
/// `n`-candidate record, for a `d`-dimensional model with parameters drawn
/// from `[-0.5, 0.5)`.
pub fn parameter_audit(
    d: usize,
    n: usize,
    aux_text: bool,
    epsilon: f64,
    seed: u64,
) -> Result<AuditReport> {
    let record = audit_record(n, 2, seed);
    let vocab = Vocabulary::build(std::slice::from_ref(&record), n)?;
    let dims = ModelDims {
        d,
        feature_dim: 2,
        aux_text,
    };
    let model = PointerModel::with_init_scale(dims, vocab, seed, 0.5);
    let mut target = build_rank_target(
        &record,
        SimilarityScorer::Precomputed,
        &RankWeights::default(),
        model.vocab().layout(),
    )?;
    if aux_text {
        target = target.with_text_prefix(&model.vocab().text_positions(&record.question));
    }
    let (_, analytic) = model.loss_and_grad(&record, &target)?;
    let numeric = numeric_param_grad(&model, &record, &target, epsilon)?;
    let mut out = AuditReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coordinates: numeric.len(),
    };
    for (i, (a, b)) in analytic.0.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *b, REL_ERR_FLOOR);
        if e > out.max_rel_err || out.worst.is_empty() {
            out.max_rel_err = out.max_rel_err.max(e);
            out.worst = format!("parameter {i} ({})", model.shapes().tensor_of(i));
        }
    }
    Ok(out)
}
