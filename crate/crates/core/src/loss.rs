//! Masked pointer cross-entropy with rank weights.
//!
//! Pointer steps normalize only over their mask `C_k` (remaining candidates
//! plus ENDLIST); text steps normalize over the whole vocabulary. Each step
//! loss is scaled by its weight and the sum is divided by the total weight:
//!
//! ```text
//! L_total = Σ_t w_t L_t / Σ_t w_t
//! ```
//!
//! Masking is applied inside the normalizer, never by writing into the
//! logits, so loss and gradient are pure functions of their inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::target::{RankTarget, StepKind};

/// Per-rank loss multipliers. Ranks beyond the configured ones weigh 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights {
    alpha: Vec<f64>,
}

impl RankWeights {
    pub const DEFAULT_ALPHA: [f64; 3] = [3.0, 1.5, 1.2];

    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 1.0)) {
            return Err(Error::Config(format!("rank weight {a} must be >= 1")));
        }
        Ok(RankWeights { alpha })
    }

    pub fn uniform() -> Self {
        RankWeights { alpha: Vec::new() }
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Weight of the pointer step assigning rank `k` (1-based).
    pub fn weight(&self, k: usize) -> f64 {
        assert!(k >= 1, "ranks are 1-based");
        self.alpha.get(k - 1).copied().unwrap_or(1.0)
    }
}

impl Default for RankWeights {
    fn default() -> Self {
        RankWeights {
            alpha: Self::DEFAULT_ALPHA.to_vec(),
        }
    }
}

pub fn rank_weight(k: usize, weights: &RankWeights) -> f64 {
    weights.weight(k)
}

/// Row-major `rows x cols` matrix of per-step scores over the extended vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LogitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LogitMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        LogitMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(LogitMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.data[t * self.cols + j]
    }

    pub fn set(&mut self, t: usize, j: usize, v: f64) {
        self.data[t * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn check_mask(row: &[f64], mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(&j) = mask.iter().find(|&&j| j >= row.len()) {
        return Err(Error::IndexOutOfRange {
            index: j,
            size: row.len(),
        });
    }
    if let Some(&j) = mask.iter().find(|&&j| !row[j].is_finite()) {
        return Err(Error::NonFiniteLogit { row: 0, col: j });
    }
    Ok(())
}

/// `max` and `log Σ exp(z - max)` over the masked entries.
fn masked_log_normalizer(row: &[f64], mask: &[usize]) -> (f64, f64) {
    let max = mask
        .iter()
        .map(|&j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = mask.iter().map(|&j| (row[j] - max).exp()).sum();
    (max, sum.ln())
}

/// Softmax restricted to `mask`. Entries outside the mask are exactly 0.
pub fn masked_softmax(row: &[f64], mask: &[usize]) -> Result<Vec<f64>> {
    check_mask(row, mask)?;
    let (max, log_z) = masked_log_normalizer(row, mask);
    let mut p = vec![0.0; row.len()];
    for &j in mask {
        p[j] = (row[j] - max - log_z).exp();
    }
    Ok(p)
}

/// Masked log-probability of `target`.
pub fn masked_log_prob(row: &[f64], mask: &[usize], target: usize) -> Result<f64> {
    check_mask(row, mask)?;
    if !mask.contains(&target) {
        return Err(Error::TargetNotInMask { target });
    }
    let (max, log_z) = masked_log_normalizer(row, mask);
    Ok(row[target] - max - log_z)
}

/// `-log P(target | mask)` and its gradient with respect to the row.
pub fn pointer_step_loss(row: &[f64], mask: &[usize], target: usize) -> Result<(f64, Vec<f64>)> {
    let loss = -masked_log_prob(row, mask, target)?;
    let mut grad = masked_softmax(row, mask)?;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Full-vocabulary cross-entropy and its gradient `p - onehot`.
pub fn text_step_loss(row: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= row.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            size: row.len(),
        });
    }
    let all: Vec<usize> = (0..row.len()).collect();
    pointer_step_loss(row, &all, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub kind: StepKind,
    pub loss: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_step: Vec<StepLoss>,
    /// ∂L_total/∂z, same shape as the logits.
    pub grad: LogitMatrix,
    pub total_weight: f64,
}

/// `Σ w_t L_t / Σ w_t`, the reduction used by [`sequence_loss`].
pub fn weighted_mean(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", losses.len()),
            actual: weights.len().to_string(),
        });
    }
    let total_weight: f64 = weights.iter().sum();
    if total_weight.is_nan() || total_weight <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let weighted: f64 = losses.iter().zip(weights).map(|(l, w)| w * l).sum();
    Ok(weighted / total_weight)
}

/// Weighted, normalized loss of a full target sequence.
///
/// Marker steps contribute neither loss nor weight.
pub fn sequence_loss(logits: &LogitMatrix, target: &RankTarget) -> Result<LossReport> {
    if logits.rows() != target.len() || logits.cols() != target.layout.size() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", target.len(), target.layout.size()),
            actual: format!("{}x{}", logits.rows(), logits.cols()),
        });
    }
    let mut grad = LogitMatrix::zeros(logits.rows(), logits.cols());
    let mut per_step = Vec::with_capacity(target.len());
    for (t, step) in target.steps.iter().enumerate() {
        let row = logits.row(t);
        if step.kind != StepKind::Marker {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLogit { row: t, col: j });
            }
        }
        let (loss, row_grad) = match step.kind {
            StepKind::Marker => (0.0, None),
            StepKind::Pointer => {
                let (l, g) = pointer_step_loss(row, &step.mask, step.target)?;
                (l, Some(g))
            }
            StepKind::Text => {
                let (l, g) = text_step_loss(row, step.target)?;
                (l, Some(g))
            }
        };
        if let Some(g) = row_grad {
            grad.row_mut(t).copy_from_slice(&g);
        }
        per_step.push(StepLoss {
            step: t,
            kind: step.kind,
            loss,
            weight: step.weight,
        });
    }
    let losses: Vec<f64> = per_step.iter().map(|s| s.loss).collect();
    let weights: Vec<f64> = per_step.iter().map(|s| s.weight).collect();
    let total = weighted_mean(&losses, &weights)?;
    let total_weight: f64 = weights.iter().sum();
    for (t, step) in target.steps.iter().enumerate() {
        let scale = step.weight / total_weight;
        grad.row_mut(t).iter_mut().for_each(|g| *g *= scale);
    }
    Ok(LossReport {
        total,
        per_step,
        grad,
        total_weight,
    })
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// derivative is zero from dividing round-off by round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor used by the gradient audits.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(trial, row, column)` of the worst coordinate.
    pub worst: (usize, usize, usize),
    pub coordinates: usize,
}

/// Compares the analytic logit gradient of [`sequence_loss`] with central
/// differences on `trials` random logit matrices drawn uniformly from
/// `[-3, 3)`. Off-mask coordinates are included.
pub fn grad_check(
    target: &RankTarget,
    trials: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (target.len(), target.layout.size());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0),
        coordinates: 0,
    };
    for trial in 0..trials.max(1) {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let logits = LogitMatrix::from_vec(rows, cols, data)?;
        let analytic = sequence_loss(&logits, target)?.grad;
        let numeric = numeric_logit_grad(&logits, target, epsilon)?;
        for t in 0..rows {
            for j in 0..cols {
                let e = relative_error(analytic.get(t, j), numeric.get(t, j), REL_ERR_FLOOR);
                report.coordinates += 1;
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = (trial, t, j);
                }
            }
        }
    }
    Ok(report)
}

/// Central-difference gradient of the total loss with respect to every logit.
pub fn numeric_logit_grad(
    logits: &LogitMatrix,
    target: &RankTarget,
    epsilon: f64,
) -> Result<LogitMatrix> {
    let mut probe = logits.clone();
    let mut out = LogitMatrix::zeros(logits.rows(), logits.cols());
    for i in 0..probe.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + epsilon;
        let plus = sequence_loss(&probe, target)?.total;
        probe.as_mut_slice()[i] = orig - epsilon;
        let minus = sequence_loss(&probe, target)?.total;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::RankTarget;
    use crate::vocab::Layout;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn target(perm: Vec<usize>, weights: &RankWeights) -> RankTarget {
        let n = perm.len();
        RankTarget::from_permutation(perm, vec![0.5; n], weights, Layout::new(5, 2)).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let p = masked_softmax(&[0.0; 6], &[1, 3, 5]).unwrap();
        for j in [1, 3, 5] {
            assert!((p[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        for j in [0, 2, 4] {
            assert_eq!(p[j], 0.0);
        }
    }

    #[test]
    fn softmax_two_way() {
        let row = [LN2, 0.0, 7.0];
        let p = masked_softmax(&row, &[0, 1]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(masked_softmax(&[0.0], &[]), Err(Error::EmptyMask)));
        assert!(matches!(
            masked_softmax(&[0.0], &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            masked_softmax(&[f64::NAN, 0.0], &[0, 1]),
            Err(Error::NonFiniteLogit { .. })
        ));
    }

    #[test]
    fn pointer_loss_two_way() {
        let row = [LN2, 0.0, 5.0, -1.0];
        let (loss, grad) = pointer_step_loss(&row, &[0, 1], 0).unwrap();
        assert!((loss - (1.5f64).ln()).abs() < 1e-15);
        assert!((loss - 0.405465).abs() < 1e-6);
        assert!((grad[0] + 1.0 / 3.0).abs() < 1e-15);
        assert!((grad[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&grad[2..], &[0.0, 0.0]);
    }

    #[test]
    fn pointer_loss_forced_choice() {
        let (loss, grad) = pointer_step_loss(&[1.0, 2.0, 3.0], &[2], 2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(matches!(
            pointer_step_loss(&[1.0, 2.0], &[0], 1),
            Err(Error::TargetNotInMask { target: 1 })
        ));
    }

    #[test]
    fn text_loss_uniform() {
        let (loss, _) = text_step_loss(&[0.0; 8], 3).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-15);
        assert!((loss - 2.079442).abs() < 1e-6);
    }

    #[test]
    fn text_loss_limit() {
        let mut row = [0.0; 8];
        row[2] = 60.0;
        let (loss, _) = text_step_loss(&row, 2).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn text_equals_full_mask_pointer() {
        let row = [0.3, -1.2, 2.0, 0.1];
        let (a, ga) = text_step_loss(&row, 1).unwrap();
        let (b, gb) = pointer_step_loss(&row, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn rank_weight_table() {
        let w = RankWeights::default();
        assert_eq!(rank_weight(1, &w), 3.0);
        assert_eq!(rank_weight(2, &w), 1.5);
        assert_eq!(rank_weight(3, &w), 1.2);
        assert_eq!(rank_weight(4, &w), 1.0);
        assert_eq!(rank_weight(40, &w), 1.0);
        let custom = RankWeights::new(vec![1.0, 1.5, 1.2]).unwrap();
        assert_eq!(rank_weight(1, &custom), 1.0);
        assert!(RankWeights::new(vec![0.5]).is_err());
    }

    /// Text step whose full-vocabulary CE over `v` columns equals `loss`
    /// when the target logit is 0 and the others share one value.
    fn row_with_loss(v: usize, target: usize, loss: f64) -> Vec<f64> {
        let other = ((loss.exp() - 1.0) / (v as f64 - 1.0)).ln();
        let mut row = vec![other; v];
        row[target] = 0.0;
        row
    }

    #[test]
    fn weighted_aggregate_hand_value() {
        let layout = Layout::new(1, 1);
        let v = layout.size();
        let step = |weight: f64| crate::target::Step {
            token: crate::vocab::Token::Text(0),
            target: layout.unk(),
            kind: StepKind::Text,
            mask: Vec::new(),
            weight,
            rank: None,
        };
        let t = RankTarget {
            layout,
            permutation: vec![1],
            sims: vec![1.0],
            steps: vec![step(3.0), step(1.0)],
        };
        let mut data = row_with_loss(v, layout.unk(), 1.0);
        data.extend(row_with_loss(v, layout.unk(), 2.0));
        let logits = LogitMatrix::from_vec(2, v, data).unwrap();
        let r = sequence_loss(&logits, &t).unwrap();
        assert!((r.per_step[0].loss - 1.0).abs() < 1e-14);
        assert!((r.per_step[1].loss - 2.0).abs() < 1e-14);
        assert!((r.total - 1.25).abs() < 1e-14);
    }

    #[test]
    fn weighted_mean_exact() {
        assert_eq!(weighted_mean(&[1.0, 2.0], &[3.0, 1.0]).unwrap(), 1.25);
        assert!(weighted_mean(&[1.0], &[0.0]).is_err());
        assert!(weighted_mean(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let t = target(vec![1, 2], &RankWeights::default());
        let logits = LogitMatrix::zeros(t.len() + 1, t.layout.size());
        assert!(matches!(
            sequence_loss(&logits, &t),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let t = target(vec![1, 2], &RankWeights::default());
        let mut logits = LogitMatrix::zeros(t.len(), t.layout.size());
        logits.set(1, 0, f64::INFINITY);
        assert!(matches!(
            sequence_loss(&logits, &t),
            Err(Error::NonFiniteLogit { row: 1, col: 0 })
        ));
    }

    #[test]
    fn grad_check_three_candidates() {
        let t = target(vec![3, 1, 2], &RankWeights::default());
        let r = grad_check(&t, 50, 1e-4, 7).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn grad_check_at_zero_and_off_mask() {
        let t = target(vec![2, 1, 3], &RankWeights::default());
        let logits = LogitMatrix::zeros(t.len(), t.layout.size());
        let analytic = sequence_loss(&logits, &t).unwrap().grad;
        let numeric = numeric_logit_grad(&logits, &t, 1e-4).unwrap();
        for i in 0..analytic.as_slice().len() {
            assert!((analytic.as_slice()[i] - numeric.as_slice()[i]).abs() < 1e-9);
        }
        for (row, step) in t.steps.iter().enumerate() {
            for j in 0..t.layout.size() {
                if !step.mask.contains(&j) {
                    assert_eq!(analytic.get(row, j), 0.0);
                    assert_eq!(numeric.get(row, j), 0.0);
                }
            }
        }
    }

    fn random_case() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        (1usize..=5).prop_flat_map(|n| {
            let perm = Just((1..=n).collect::<Vec<_>>()).prop_shuffle();
            let layout = Layout::new(5, 2);
            let cells = (2 * n + 1) * layout.size();
            (perm, prop::collection::vec(-4.0f64..4.0, cells))
        })
    }

    proptest! {
        #[test]
        fn masked_probs_sum_to_one((perm, data) in random_case()) {
            let t = target(perm, &RankWeights::default());
            let logits = LogitMatrix::from_vec(t.len(), t.layout.size(), data).unwrap();
            for (row, step) in t.pointer_steps() {
                let p = masked_softmax(logits.row(row), &step.mask).unwrap();
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for (j, &pj) in p.iter().enumerate() {
                    if !step.mask.contains(&j) {
                        prop_assert_eq!(pj, 0.0);
                    }
                }
            }
        }

        #[test]
        fn shift_invariance((perm, data) in random_case(), shift in -50.0f64..50.0) {
            let t = target(perm, &RankWeights::default());
            let logits = LogitMatrix::from_vec(t.len(), t.layout.size(), data.clone()).unwrap();
            let shifted = LogitMatrix::from_vec(
                t.len(), t.layout.size(), data.iter().map(|z| z + shift).collect()).unwrap();
            let a = sequence_loss(&logits, &t).unwrap();
            let b = sequence_loss(&shifted, &t).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-10);
            for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn grad_rows_sum_to_zero((perm, data) in random_case()) {
            let t = target(perm, &RankWeights::default());
            let logits = LogitMatrix::from_vec(t.len(), t.layout.size(), data).unwrap();
            let r = sequence_loss(&logits, &t).unwrap();
            for row in 0..t.len() {
                let s: f64 = r.grad.row(row).iter().sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }

        #[test]
        fn uniform_weights_give_plain_mean((perm, data) in random_case()) {
            let t = target(perm, &RankWeights::uniform());
            let logits = LogitMatrix::from_vec(t.len(), t.layout.size(), data).unwrap();
            let r = sequence_loss(&logits, &t).unwrap();
            let scored: Vec<f64> = r.per_step.iter()
                .filter(|s| s.kind != StepKind::Marker)
                .map(|s| s.loss)
                .collect();
            let mean = scored.iter().sum::<f64>() / scored.len() as f64;
            prop_assert!((r.total - mean).abs() <= 1e-15 * mean.abs().max(1.0));
        }

        #[test]
        fn larger_alpha_raises_rank1_share(a in 1.0f64..10.0, bump in 0.01f64..5.0) {
            let low = target(vec![1, 2, 3, 4], &RankWeights::new(vec![a, 1.5, 1.2]).unwrap());
            let high = target(vec![1, 2, 3, 4], &RankWeights::new(vec![a + bump, 1.5, 1.2]).unwrap());
            let share = |t: &RankTarget| t.steps[1].weight / t.weights().iter().sum::<f64>();
            prop_assert!(share(&high) > share(&low));
        }

        #[test]
        fn logits_not_mutated((perm, data) in random_case()) {
            let t = target(perm, &RankWeights::default());
            let logits = LogitMatrix::from_vec(t.len(), t.layout.size(), data).unwrap();
            let copy = logits.clone();
            let first = sequence_loss(&logits, &t).unwrap();
            prop_assert_eq!(&logits, &copy);
            prop_assert_eq!(sequence_loss(&logits, &t).unwrap(), first);
        }
    }
}
