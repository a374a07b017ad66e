//! Ranking and answer-quality metrics.
//!
//! | Metric | Input | Range |
//! |--------|-------|-------|
//! | [`ndcg`] | similarity gains in system order | `[0, 1]` |
//! | [`rouge_l`] | candidate vs. reference text | `[0, 1]` |
//! | [`meteor_exact`] | candidate vs. reference text | `[0, 1)` |
//! | [`kendall_tau`] | system order vs. ideal order | `[-1, 1]` |
//!
//! Gains for nDCG are raw similarities, not `2^rel - 1`, and the list is
//! scored at full depth.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::vocab::words;

/// Published full-scale dev-split numbers for the generator+reranker system
/// (nDCG under BERTScore ranking, max METEOR). Comparison only; the desk-scale
/// pipeline does not reproduce them.
pub const REFERENCE_DEV_NDCG_BERTSCORE: f64 = 0.998;
pub const REFERENCE_DEV_METEOR_MAX: f64 = 0.250;

fn dcg(gains: &[f64]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Normalized DCG of `gains`, listed in system order.
///
/// Returns 1.0 when every gain is zero, since every order is then ideal.
pub fn ndcg(gains: &[f64]) -> Result<f64> {
    if gains.is_empty() {
        return Err(Error::EmptyList);
    }
    if let Some(&g) = gains.iter().find(|g| g.is_nan() || **g < 0.0) {
        return Err(Error::NegativeGain(g));
    }
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok((dcg(gains) / idcg).min(1.0))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1) over lowercased whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Aligns candidate tokens to reference tokens by exact match. Returns
/// `(candidate position, reference position)` pairs sorted by candidate position.
///
/// Every candidate token with an unused reference occurrence is matched, so
/// the match count is maximal. Among reference occurrences the one that
/// continues the current chunk is preferred, then the one opening the longest
/// contiguous run, then the earliest.
fn align_exact(c: &[String], r: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for (i, w) in c.iter().enumerate() {
        let options: Vec<usize> = (0..r.len()).filter(|&j| !used[j] && &r[j] == w).collect();
        if options.is_empty() {
            continue;
        }
        let extends = last
            .and_then(|(li, lj)| (li + 1 == i && options.contains(&(lj + 1))).then_some(lj + 1));
        let j = extends.unwrap_or_else(|| {
            let run = |j: usize| {
                (0..)
                    .take_while(|&d| {
                        i + d < c.len() && j + d < r.len() && !used[j + d] && c[i + d] == r[j + d]
                    })
                    .count()
            };
            // max_by_key keeps the last maximum, so scan in reverse for the earliest.
            options
                .iter()
                .rev()
                .copied()
                .max_by_key(|&j| run(j))
                .unwrap()
        });
        used[j] = true;
        pairs.push((i, j));
        last = Some((i, j));
    }
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR restricted to the exact-match module: recall-weighted harmonic mean
/// `10PR / (R + 9P)` times `1 - 0.5 * (chunks / matches)^3`.
pub fn meteor_exact(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let pairs = align_exact(&c, &r);
    let m = pairs.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / c.len() as f64;
    let rec = m / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let frag = count_chunks(&pairs) as f64 / m;
    let penalty = 0.5 * frag.powi(3);
    f_mean * (1.0 - penalty)
}

/// Kendall's tau between two orderings of the same ids.
///
/// Single-item lists have no pairs and score 1.0.
pub fn kendall_tau(system: &[usize], ideal: &[usize]) -> Result<f64> {
    let n = system.len();
    if n != ideal.len() {
        return Err(Error::NotAPermutation);
    }
    let sys_set: HashSet<usize> = system.iter().copied().collect();
    let ideal_set: HashSet<usize> = ideal.iter().copied().collect();
    if sys_set.len() != n || sys_set != ideal_set {
        return Err(Error::NotAPermutation);
    }
    if n < 2 {
        return Ok(1.0);
    }
    let position: std::collections::HashMap<usize, usize> =
        ideal.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let ranks: Vec<usize> = system.iter().map(|id| position[id]).collect();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            if ranks[i] < ranks[j] {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

/// Corpus-level list aggregates: mean nDCG, mean of per-list mean
/// similarity, mean of per-list max similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ListAggregates {
    pub ndcg: f64,
    pub mean_sim: f64,
    pub max_sim: f64,
}

/// `lists[q]` holds the similarities of query `q`'s candidates in system order.
pub fn list_aggregates(lists: &[Vec<f64>]) -> Result<ListAggregates> {
    if lists.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut agg = ListAggregates {
        ndcg: 0.0,
        mean_sim: 0.0,
        max_sim: 0.0,
    };
    for list in lists {
        agg.ndcg += ndcg(list)?;
        agg.mean_sim += list.iter().sum::<f64>() / list.len() as f64;
        agg.max_sim += list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let q = lists.len() as f64;
    agg.ndcg /= q;
    agg.mean_sim /= q;
    agg.max_sim /= q;
    Ok(agg)
}

/// Corpus-level evaluation of a set of ranked lists.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub queries: usize,
    pub ndcg: f64,
    pub mean_sim: f64,
    pub max_sim: f64,
    /// Top-ranked answer against the reference; absent when no query has one.
    pub rouge_l: Option<f64>,
    pub meteor: Option<f64>,
    pub kendall_tau: f64,
    pub top1_match: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        let rows = [
            ("queries", self.queries.to_string()),
            ("ndcg", format!("{:.6}", self.ndcg)),
            ("sim_mean", format!("{:.6}", self.mean_sim)),
            ("sim_max", format!("{:.6}", self.max_sim)),
            ("rouge_l@1", opt(self.rouge_l)),
            ("meteor@1", opt(self.meteor)),
            ("kendall_tau", format!("{:.6}", self.kendall_tau)),
            ("top1_match", format!("{:.6}", self.top1_match)),
        ];
        for (name, value) in rows {
            writeln!(f, "{name:<12} {value:>10}")?;
        }
        Ok(())
    }
}

/// One evaluated query: the system order, the ideal order and the
/// similarity of every candidate (indexed by `id - 1`).
#[derive(Debug, Clone)]
pub struct RankedList<'a> {
    pub system: &'a [usize],
    pub ideal: &'a [usize],
    pub sims: &'a [f64],
    /// Texts of the top system answer and of the reference, when available.
    pub top_text: Option<&'a str>,
    pub reference: Option<&'a str>,
}

pub fn report(lists: &[RankedList<'_>]) -> Result<MetricReport> {
    if lists.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut gains = Vec::with_capacity(lists.len());
    let mut tau = 0.0;
    let mut top1 = 0usize;
    let mut rouge = Vec::new();
    let mut meteor = Vec::new();
    for l in lists {
        gains.push(
            l.system
                .iter()
                .map(|&id| l.sims[id - 1])
                .collect::<Vec<_>>(),
        );
        tau += kendall_tau(l.system, l.ideal)?;
        if l.system.first() == l.ideal.first() {
            top1 += 1;
        }
        if let (Some(t), Some(r)) = (l.top_text, l.reference) {
            rouge.push(rouge_l(t, r));
            meteor.push(meteor_exact(t, r));
        }
    }
    let agg = list_aggregates(&gains)?;
    let q = lists.len() as f64;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MetricReport {
        queries: lists.len(),
        ndcg: agg.ndcg,
        mean_sim: agg.mean_sim,
        max_sim: agg.max_sim,
        rouge_l: mean(&rouge),
        meteor: mean(&meteor),
        kendall_tau: tau / q,
        top1_match: top1 as f64 / q,
    })
}
