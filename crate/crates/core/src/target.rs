//! Rank-labeled supervision sequences.
//!
//! Candidates are ordered by similarity to the reference answer and turned
//! into the canonical stream
//! `[R_1, CAND_σ(1), R_2, CAND_σ(2), ..., R_N, CAND_σ(N), ENDLIST]`.
//! Every candidate-pointer step carries the set of still-valid targets:
//! the unselected candidates plus ENDLIST.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::RankWeights;
use crate::metrics::rouge_l;
use crate::record::{Candidate, QueryRecord};
use crate::vocab::{words, Layout, Token, ENDLIST};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityScorer {
    /// Unigram F1 over the multiset intersection of tokens.
    TokenF1,
    /// ROUGE-L F1, candidate against reference.
    RougeL,
    /// Reads [`Candidate::gold_similarity`].
    Precomputed,
}

impl SimilarityScorer {
    pub fn name(&self) -> &'static str {
        match self {
            SimilarityScorer::TokenF1 => "token_f1",
            SimilarityScorer::RougeL => "rouge_l",
            SimilarityScorer::Precomputed => "precomputed",
        }
    }

    /// Picks `Precomputed` when every candidate of every record carries a
    /// similarity, `TokenF1` otherwise.
    pub fn auto(corpus: &[QueryRecord]) -> Self {
        let all = corpus
            .iter()
            .flat_map(|r| &r.candidates)
            .all(|c| c.gold_similarity.is_some());
        if all && !corpus.is_empty() {
            SimilarityScorer::Precomputed
        } else {
            SimilarityScorer::TokenF1
        }
    }

    pub fn score(&self, candidate: &Candidate, reference: Option<&str>) -> Result<f64> {
        score_similarity(candidate, reference, *self)
    }
}

impl fmt::Display for SimilarityScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityScorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_f1" => Ok(SimilarityScorer::TokenF1),
            "rouge_l" => Ok(SimilarityScorer::RougeL),
            "precomputed" => Ok(SimilarityScorer::Precomputed),
            other => Err(Error::Config(format!(
                "unknown scorer {other:?} (expected token_f1, rouge_l or precomputed)"
            ))),
        }
    }
}

/// Harmonic mean of unigram precision and recall, counting each shared
/// token at most as often as it occurs on both sides.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &r {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &c {
        if let Some(n) = counts.get_mut(w.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / c.len() as f64;
    let rec = common as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

pub fn score_similarity(
    candidate: &Candidate,
    reference: Option<&str>,
    scorer: SimilarityScorer,
) -> Result<f64> {
    let lexical = |f: fn(&str, &str) -> f64| match reference {
        Some(r) if !r.trim().is_empty() => Ok(f(&candidate.text, r)),
        _ => Err(Error::MissingReference(String::new())),
    };
    match scorer {
        SimilarityScorer::TokenF1 => lexical(token_f1),
        SimilarityScorer::RougeL => lexical(rouge_l),
        SimilarityScorer::Precomputed => {
            candidate
                .gold_similarity
                .ok_or_else(|| Error::MissingPrecomputed {
                    query_id: String::new(),
                    candidate: candidate.id,
                })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Candidate pointer or ENDLIST; scored with the masked pointer loss.
    Pointer,
    /// Rank marker; fixed by the schedule and carries no loss.
    Marker,
    /// Ordinary text; scored over the full vocabulary.
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub token: Token,
    /// Vocabulary index of `token`.
    pub target: usize,
    pub kind: StepKind,
    /// Allowed vocabulary indices, ascending. Empty unless `kind` is `Pointer`.
    pub mask: Vec<usize>,
    pub weight: f64,
    /// 1-based rank for candidate pointer steps.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTarget {
    pub layout: Layout,
    /// Candidate ids, best first.
    pub permutation: Vec<usize>,
    /// Similarity of candidate `id` at index `id - 1`.
    pub sims: Vec<f64>,
    pub steps: Vec<Step>,
}

impl RankTarget {
    /// Builds the canonical stream for a given permutation of `1..=N`.
    pub fn from_permutation(
        permutation: Vec<usize>,
        sims: Vec<f64>,
        weights: &RankWeights,
        layout: Layout,
    ) -> Result<Self> {
        let n = permutation.len();
        if n == 0 {
            return Err(Error::EmptyList);
        }
        if n > layout.n_max {
            return Err(Error::CandidateOverflow {
                query_id: String::new(),
                count: n,
                n_max: layout.n_max,
            });
        }
        if sims.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} similarities"),
                actual: sims.len().to_string(),
            });
        }
        let mut seen = vec![false; n + 1];
        for &m in &permutation {
            if m == 0 || m > n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::NotAPermutation);
            }
        }

        let mut remaining: Vec<usize> = (1..=n).collect();
        let mask_of = |remaining: &[usize]| {
            let mut mask = vec![ENDLIST];
            mask.extend(remaining.iter().map(|&m| layout.cand(m)));
            mask
        };
        let mut steps = Vec::with_capacity(2 * n + 1);
        for (k, &m) in permutation.iter().enumerate() {
            let rank = k + 1;
            steps.push(Step {
                token: Token::RankMarker(rank),
                target: layout.rank(rank),
                kind: StepKind::Marker,
                mask: Vec::new(),
                weight: 0.0,
                rank: None,
            });
            steps.push(Step {
                token: Token::CandPointer(m),
                target: layout.cand(m),
                kind: StepKind::Pointer,
                mask: mask_of(&remaining),
                weight: weights.weight(rank),
                rank: Some(rank),
            });
            remaining.retain(|&x| x != m);
        }
        steps.push(Step {
            token: Token::EndList,
            target: ENDLIST,
            kind: StepKind::Pointer,
            mask: mask_of(&remaining),
            weight: 1.0,
            rank: None,
        });
        Ok(RankTarget {
            layout,
            permutation,
            sims,
            steps,
        })
    }

    /// Prepends text steps predicting the given text positions, each
    /// weighted 1 and scored over the full vocabulary.
    pub fn with_text_prefix(mut self, text_positions: &[usize]) -> Self {
        let text: Vec<Step> = text_positions
            .iter()
            .map(|&p| Step {
                token: Token::Text(p),
                target: self.layout.text(p),
                kind: StepKind::Text,
                mask: Vec::new(),
                weight: 1.0,
                rank: None,
            })
            .collect();
        self.steps.splice(0..0, text);
        self
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn pointer_steps(&self) -> impl Iterator<Item = (usize, &Step)> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == StepKind::Pointer)
    }

    /// Masks of the pointer steps in order (N+1 of them).
    pub fn masks(&self) -> Vec<&[usize]> {
        self.pointer_steps()
            .map(|(_, s)| s.mask.as_slice())
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.weight).collect()
    }
}

/// Scores every candidate against the reference and orders them by
/// similarity, highest first, ties broken by ascending id.
pub fn build_rank_target(
    record: &QueryRecord,
    scorer: SimilarityScorer,
    weights: &RankWeights,
    layout: Layout,
) -> Result<RankTarget> {
    record.validate()?;
    if record.n() > layout.n_max {
        return Err(Error::CandidateOverflow {
            query_id: record.query_id.clone(),
            count: record.n(),
            n_max: layout.n_max,
        });
    }
    let mut sims = vec![0.0; record.n()];
    for c in &record.candidates {
        sims[c.id - 1] = scorer
            .score(c, record.reference.as_deref())
            .map_err(|e| match e {
                Error::MissingReference(_) => Error::MissingReference(record.query_id.clone()),
                Error::MissingPrecomputed { candidate, .. } => Error::MissingPrecomputed {
                    query_id: record.query_id.clone(),
                    candidate,
                },
                e => e,
            })?;
    }
    let permutation = order_by_similarity(&sims);
    RankTarget::from_permutation(permutation, sims, weights, layout)
}

/// Candidate ids sorted by `sims[id - 1]` descending, ties by ascending id.
pub fn order_by_similarity(sims: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..=sims.len()).collect();
    ids.sort_by(|&a, &b| sims[b - 1].total_cmp(&sims[a - 1]).then(a.cmp(&b)));
    ids
}

/// Surface form: one `<Rk> = <CAND_m>` line per rank, then `<ENDLIST>`.
pub fn render_sequence(permutation: &[usize]) -> String {
    let mut out = String::new();
    for (k, m) in permutation.iter().enumerate() {
        out.push_str(&format!("<R{}> = <CAND_{}>\n", k + 1, m));
    }
    out.push_str("<ENDLIST>");
    out
}

fn parse_line(line: &str, expected_rank: usize) -> Result<usize> {
    let bad = || Error::Parse(format!("malformed line {line:?}"));
    let (lhs, rhs) = line.split_once('=').ok_or_else(bad)?;
    let rank: usize = lhs
        .trim()
        .strip_prefix("<R")
        .and_then(|s| s.strip_suffix('>'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(bad)?;
    if rank != expected_rank {
        return Err(Error::Parse(format!(
            "expected rank {expected_rank}, found <R{rank}>"
        )));
    }
    rhs.trim()
        .strip_prefix("<CAND_")
        .and_then(|s| s.strip_suffix('>'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(bad)
}

/// Inverse of [`render_sequence`]. The text must rank all `n` candidates.
pub fn parse_sequence(text: &str, n: usize) -> Result<Vec<usize>> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Parse("empty sequence".into()));
    }
    let mut permutation = Vec::new();
    let mut seen = vec![false; n + 1];
    let mut ended = false;
    for line in lines {
        if ended {
            return Err(Error::Parse(format!("content after <ENDLIST>: {line:?}")));
        }
        if line == "<ENDLIST>" {
            ended = true;
            continue;
        }
        let m = parse_line(line, permutation.len() + 1)?;
        if m == 0 || m > n {
            return Err(Error::Parse(format!("<CAND_{m}> outside 1..={n}")));
        }
        if std::mem::replace(&mut seen[m], true) {
            return Err(Error::DuplicatePointer(m));
        }
        permutation.push(m);
    }
    if !ended {
        return Err(Error::MissingEndList);
    }
    if permutation.len() != n {
        return Err(Error::Parse(format!(
            "ranked {} of {n} candidates",
            permutation.len()
        )));
    }
    Ok(permutation)
}
