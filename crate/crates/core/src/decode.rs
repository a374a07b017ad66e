//! Permutation-valid decoding over pointer steps.
//!
//! Each step normalizes over the candidates not yet selected. By default
//! ENDLIST only becomes available (and is then forced) once every candidate
//! is placed, so the output ranks all `N`. With `allow_early_stop` ENDLIST
//! is selectable at every step and lists may be truncated.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::loss::{masked_log_prob, masked_softmax};
use crate::model::PointerPolicy;
use crate::record::QueryRecord;
use crate::vocab::{Layout, ENDLIST};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    pub allow_early_stop: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 1,
            allow_early_stop: false,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(width: usize) -> Self {
        DecodeOptions {
            beam: width,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Candidate ids, best first. Never contains duplicates.
    pub ids: Vec<usize>,
    /// Log-probability of each selection.
    pub step_log_probs: Vec<f64>,
    /// Sequence log-probability, termination included.
    pub log_prob: f64,
}

impl Ranking {
    /// Cumulative log-probability after each prefix; non-increasing.
    pub fn prefix_scores(&self) -> Vec<f64> {
        self.step_log_probs
            .iter()
            .scan(0.0, |acc, lp| {
                *acc += lp;
                Some(*acc)
            })
            .collect()
    }
}

/// Valid next targets after `selected` has been chosen from `1..=n`, as
/// ascending vocabulary indices.
pub fn step_mask(
    layout: Layout,
    n: usize,
    selected: &[usize],
    allow_early_stop: bool,
) -> Vec<usize> {
    let done = selected.len() >= n;
    let mut mask = Vec::with_capacity(n + 1 - selected.len().min(n));
    if done || allow_early_stop {
        mask.push(ENDLIST);
    }
    if !done {
        mask.extend(
            (1..=n)
                .filter(|m| !selected.contains(m))
                .map(|m| layout.cand(m)),
        );
    }
    mask
}

/// The next-step distribution: the mask and a full-width probability vector
/// that is zero off the mask.
pub fn step_distribution<P: PointerPolicy>(
    policy: &P,
    state: &P::State,
    n: usize,
    selected: &[usize],
    allow_early_stop: bool,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mask = step_mask(policy.layout(), n, selected, allow_early_stop);
    let row = policy.pointer_row(state);
    let probs = masked_softmax(&row, &mask)?;
    Ok((mask, probs))
}

#[derive(Clone)]
struct Hypothesis<S> {
    state: S,
    ids: Vec<usize>,
    step_log_probs: Vec<f64>,
    log_prob: f64,
    done: bool,
}

fn rank_order<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.ids.cmp(&b.ids))
        .then_with(|| a.done.cmp(&b.done))
}

/// Greedy (`beam == 1`) or beam search. Finished hypotheses keep competing
/// for beam slots, so a beam at least as wide as the number of complete
/// sequences is exhaustive.
pub fn decode<P: PointerPolicy>(
    policy: &P,
    record: &QueryRecord,
    options: DecodeOptions,
) -> Result<Ranking> {
    let layout = policy.layout();
    let n = record.n();
    if n > layout.n_max {
        return Err(Error::CandidateOverflow {
            query_id: record.query_id.clone(),
            count: n,
            n_max: layout.n_max,
        });
    }
    let width = options.beam.max(1);
    let mut beam = vec![Hypothesis {
        state: policy.start(record)?,
        ids: Vec::new(),
        step_log_probs: Vec::new(),
        log_prob: 0.0,
        done: false,
    }];
    while beam.iter().any(|h| !h.done) {
        let mut next = Vec::new();
        for h in beam {
            if h.done {
                next.push(h);
                continue;
            }
            let mask = step_mask(layout, n, &h.ids, options.allow_early_stop);
            let row = policy.pointer_row(&h.state);
            for &j in &mask {
                let lp = masked_log_prob(&row, &mask, j)?;
                if j == ENDLIST {
                    next.push(Hypothesis {
                        state: h.state.clone(),
                        ids: h.ids.clone(),
                        step_log_probs: h.step_log_probs.clone(),
                        log_prob: h.log_prob + lp,
                        done: true,
                    });
                } else {
                    let id = j - layout.cand(1) + 1;
                    let mut ids = h.ids.clone();
                    ids.push(id);
                    let mut step_log_probs = h.step_log_probs.clone();
                    step_log_probs.push(lp);
                    next.push(Hypothesis {
                        state: policy.advance(&h.state, id),
                        ids,
                        step_log_probs,
                        log_prob: h.log_prob + lp,
                        done: false,
                    });
                }
            }
        }
        next.sort_by(rank_order);
        next.truncate(width);
        beam = next;
    }
    let best = beam.into_iter().next().expect("beam is never empty");
    Ok(Ranking {
        ids: best.ids,
        step_log_probs: best.step_log_probs,
        log_prob: best.log_prob,
    })
}

/// Log-probability of ranking all candidates in `order` under full-list
/// decoding (ENDLIST unavailable until every candidate is placed).
pub fn permutation_log_prob<P: PointerPolicy>(
    policy: &P,
    record: &QueryRecord,
    order: &[usize],
) -> Result<f64> {
    let layout = policy.layout();
    let n = record.n();
    let mut state = policy.start(record)?;
    let mut total = 0.0;
    for (k, &id) in order.iter().enumerate() {
        let mask = step_mask(layout, n, &order[..k], false);
        total += masked_log_prob(&policy.pointer_row(&state), &mask, layout.cand(id))?;
        state = policy.advance(&state, id);
    }
    Ok(total)
}
