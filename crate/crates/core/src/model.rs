//! Small recurrent pointer network.
//!
//! ```text
//! u_m     = mean(embed(words of candidate m)) ⊕ features_m
//! enc_m   = W2 · tanh(W1 · u_m + b1) + b2
//! s_1     = tanh(Wq · mean(embed(question words)) + bq)
//! s_{k+1} = tanh(Wd · [s_k ; enc_{selected_k}] + bd)
//! z_k     = ⟨s_k, enc_m⟩ at CAND_m,  ⟨s_k, endlist⟩ at ENDLIST
//! ```
//!
//! Every other column of a pointer row holds [`SENTINEL`]. The optional text
//! head predicts each question word from the previous one:
//! `z = Wt · embed(prev) + bt` over the whole vocabulary.
//!
//! All parameters live in one flat `Vec<f64>`; [`Shapes`] records where each
//! tensor starts.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{sequence_loss, LogitMatrix, LossReport};
use crate::record::QueryRecord;
use crate::target::{RankTarget, StepKind};
use crate::vocab::{Layout, Vocabulary, ENDLIST};

/// Logit written into columns a step can never select.
pub const SENTINEL: f64 = -1e9;
pub const DEFAULT_DIM: usize = 32;
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub feature_dim: usize,
    pub aux_text: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d: DEFAULT_DIM,
            feature_dim: 0,
            aux_text: false,
        }
    }
}

/// Offsets of each parameter tensor inside the flat vector. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shapes {
    pub embed: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wd: Range<usize>,
    pub bd: Range<usize>,
    pub endlist: Range<usize>,
    pub wt: Range<usize>,
    pub bt: Range<usize>,
    pub total: usize,
}

impl Shapes {
    pub fn new(dims: ModelDims, layout: Layout) -> Self {
        let d = dims.d;
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let embed = take(layout.n_text * d);
        let w1 = take(d * (d + dims.feature_dim));
        let b1 = take(d);
        let w2 = take(d * d);
        let b2 = take(d);
        let wq = take(d * d);
        let bq = take(d);
        let wd = take(d * 2 * d);
        let bd = take(d);
        let endlist = take(d);
        let (wt, bt) = if dims.aux_text {
            (take(layout.size() * d), take(layout.size()))
        } else {
            (take(0), take(0))
        };
        Shapes {
            embed,
            w1,
            b1,
            w2,
            b2,
            wq,
            bq,
            wd,
            bd,
            endlist,
            wt,
            bt,
            total: at,
        }
    }
}

impl Shapes {
    /// Name of the tensor holding flat parameter `i`.
    pub fn tensor_of(&self, i: usize) -> &'static str {
        [
            ("embed", &self.embed),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wd", &self.wd),
            ("bd", &self.bd),
            ("endlist", &self.endlist),
            ("wt", &self.wt),
            ("bt", &self.bt),
        ]
        .into_iter()
        .find(|(_, r)| r.contains(&i))
        .map_or("?", |(name, _)| name)
    }
}

fn matvec(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `out += Wᵀ y`
fn matvec_t_acc(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yi) in w.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

/// `g += a bᵀ`
fn outer_acc(g: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in g.chunks_exact_mut(b.len()).zip(a) {
        if ai != 0.0 {
            for (gij, bj) in row.iter_mut().zip(b) {
                *gij += ai * bj;
            }
        }
    }
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_tanh(mut pre: Vec<f64>, bias: &[f64]) -> Vec<f64> {
    for (p, b) in pre.iter_mut().zip(bias) {
        *p = (*p + b).tanh();
    }
    pre
}

/// `dy ⊙ (1 - y²)` for `y = tanh(a)`.
fn tanh_back(dy: &[f64], y: &[f64]) -> Vec<f64> {
    dy.iter().zip(y).map(|(g, v)| g * (1.0 - v * v)).collect()
}

/// Per-record activations that do not depend on the selection history.
#[derive(Debug, Clone)]
pub struct Encoding {
    n: usize,
    question_words: Vec<usize>,
    question_mean: Vec<f64>,
    s1: Vec<f64>,
    /// Indexed by `id - 1`.
    cand_words: Vec<Vec<usize>>,
    cand_input: Vec<Vec<f64>>,
    cand_hidden: Vec<Vec<f64>>,
    cand_enc: Vec<Vec<f64>>,
}

impl Encoding {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn candidate(&self, id: usize) -> &[f64] {
        &self.cand_enc[id - 1]
    }
}

/// Decoding state: shared encoding plus the recurrent state and the ids
/// selected so far.
#[derive(Debug, Clone)]
pub struct PointerState {
    pub encoding: Arc<Encoding>,
    pub hidden: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Anything that can score the next pointer step of a partially decoded list.
pub trait PointerPolicy {
    type State: Clone;

    fn layout(&self) -> Layout;

    fn start(&self, record: &QueryRecord) -> Result<Self::State>;

    /// Logit row of width `layout().size()` for the next pointer step.
    fn pointer_row(&self, state: &Self::State) -> Vec<f64>;

    fn advance(&self, state: &Self::State, id: usize) -> Self::State;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient(pub Vec<f64>);

impl ParameterGradient {
    pub fn add_assign(&mut self, other: &ParameterGradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerModel {
    dims: ModelDims,
    vocab: Vocabulary,
    shapes: Shapes,
    params: Vec<f64>,
    seed: u64,
}

struct ForwardCache {
    encoding: Encoding,
    /// `states[k]` is the recurrent state at pointer step `k + 1`.
    states: Vec<Vec<f64>>,
    /// Context word (text position) of each text step; `None` for the first.
    text_context: Vec<(usize, Option<usize>)>,
}

impl PointerModel {
    /// Parameters drawn uniformly from `[-INIT_SCALE, INIT_SCALE)`.
    pub fn new(dims: ModelDims, vocab: Vocabulary, seed: u64) -> Self {
        Self::with_init_scale(dims, vocab, seed, INIT_SCALE)
    }

    pub fn with_init_scale(dims: ModelDims, vocab: Vocabulary, seed: u64, scale: f64) -> Self {
        let shapes = Shapes::new(dims, vocab.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..shapes.total)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        PointerModel {
            dims,
            vocab,
            shapes,
            params,
            seed,
        }
    }

    pub fn zeros(dims: ModelDims, vocab: Vocabulary) -> Self {
        let shapes = Shapes::new(dims, vocab.layout());
        let params = vec![0.0; shapes.total];
        PointerModel {
            dims,
            vocab,
            shapes,
            params,
            seed: 0,
        }
    }

    pub fn from_params(
        dims: ModelDims,
        vocab: Vocabulary,
        params: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let shapes = Shapes::new(dims, vocab.layout());
        if params.len() != shapes.total {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", shapes.total),
                actual: params.len().to_string(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(PointerModel {
            dims,
            vocab,
            shapes,
            params,
            seed,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    fn embed_row(&self, pos: usize) -> &[f64] {
        let d = self.dims.d;
        &self.params[self.shapes.embed.start + pos * d..self.shapes.embed.start + (pos + 1) * d]
    }

    fn mean_embedding(&self, positions: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.d];
        if positions.is_empty() {
            return out;
        }
        for &p in positions {
            axpy(&mut out, 1.0, self.embed_row(p));
        }
        let inv = 1.0 / positions.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn encode(&self, record: &QueryRecord) -> Result<Encoding> {
        let n = record.n();
        let layout = self.vocab.layout();
        if n > layout.n_max {
            return Err(Error::CandidateOverflow {
                query_id: record.query_id.clone(),
                count: n,
                n_max: layout.n_max,
            });
        }
        record.validate()?;
        let d = self.dims.d;
        let f = self.dims.feature_dim;

        let question_words = self.vocab.text_positions(&record.question);
        let question_mean = self.mean_embedding(&question_words);
        let s1 = add_tanh(
            matvec(self.p(&self.shapes.wq), d, &question_mean),
            self.p(&self.shapes.bq),
        );

        let mut cand_words = vec![Vec::new(); n];
        let mut cand_input = vec![Vec::new(); n];
        let mut cand_hidden = vec![Vec::new(); n];
        let mut cand_enc = vec![Vec::new(); n];
        for c in &record.candidates {
            let i = c.id - 1;
            let words = self.vocab.text_positions(&c.text);
            let mut u = self.mean_embedding(&words);
            match &c.features {
                Some(x) if x.len() == f => u.extend_from_slice(x),
                None => u.extend(std::iter::repeat_n(0.0, f)),
                Some(x) => {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{f} features"),
                        actual: format!(
                            "{} for candidate {} of {}",
                            x.len(),
                            c.id,
                            record.query_id
                        ),
                    })
                }
            }
            let h = add_tanh(
                matvec(self.p(&self.shapes.w1), d + f, &u),
                self.p(&self.shapes.b1),
            );
            let mut e = matvec(self.p(&self.shapes.w2), d, &h);
            axpy(&mut e, 1.0, self.p(&self.shapes.b2));
            cand_words[i] = words;
            cand_input[i] = u;
            cand_hidden[i] = h;
            cand_enc[i] = e;
        }
        Ok(Encoding {
            n,
            question_words,
            question_mean,
            s1,
            cand_words,
            cand_input,
            cand_hidden,
            cand_enc,
        })
    }

    fn step_state(&self, state: &[f64], chosen: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.dims.d);
        x.extend_from_slice(state);
        x.extend_from_slice(chosen);
        add_tanh(
            matvec(self.p(&self.shapes.wd), 2 * self.dims.d, &x),
            self.p(&self.shapes.bd),
        )
    }

    fn fill_pointer_row(&self, row: &mut [f64], state: &[f64], enc: &Encoding) {
        let layout = self.vocab.layout();
        row.fill(SENTINEL);
        row[ENDLIST] = dot(state, self.p(&self.shapes.endlist));
        for m in 1..=enc.n {
            row[layout.cand(m)] = dot(state, enc.candidate(m));
        }
    }

    fn fill_text_row(&self, row: &mut [f64], context: Option<usize>) {
        let d = self.dims.d;
        row.copy_from_slice(self.p(&self.shapes.bt));
        if let Some(p) = context {
            let z = matvec(self.p(&self.shapes.wt), d, self.embed_row(p));
            axpy(row, 1.0, &z);
        }
    }

    fn check_target(&self, record: &QueryRecord, target: &RankTarget) -> Result<()> {
        if target.layout != self.vocab.layout() || target.n() != record.n() {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "target over {} candidates, layout {:?}",
                    record.n(),
                    self.vocab.layout()
                ),
                actual: format!("{} candidates, layout {:?}", target.n(), target.layout),
            });
        }
        if !self.dims.aux_text && target.steps.iter().any(|s| s.kind == StepKind::Text) {
            return Err(Error::ShapeMismatch {
                expected: "no text steps (text head disabled)".into(),
                actual: "text steps in target".into(),
            });
        }
        Ok(())
    }

    fn forward_cached(
        &self,
        record: &QueryRecord,
        target: &RankTarget,
    ) -> Result<(LogitMatrix, ForwardCache)> {
        self.check_target(record, target)?;
        let encoding = self.encode(record)?;
        let layout = self.vocab.layout();
        let mut logits = LogitMatrix::filled(target.len(), layout.size(), SENTINEL);
        let mut states = vec![encoding.s1.clone()];
        let mut text_context = Vec::new();
        let mut prev_word = None;
        let mut selected = target.permutation.iter();
        for (t, step) in target.steps.iter().enumerate() {
            match step.kind {
                StepKind::Marker => logits.set(t, step.target, 0.0),
                StepKind::Text => {
                    self.fill_text_row(logits.row_mut(t), prev_word);
                    text_context.push((t, prev_word));
                    prev_word = Some(step.target - layout.text_offset());
                }
                StepKind::Pointer => {
                    let s = states.last().expect("initial state");
                    self.fill_pointer_row(logits.row_mut(t), s, &encoding);
                    if let Some(&m) = selected.next() {
                        let next = self.step_state(s, encoding.candidate(m));
                        states.push(next);
                    }
                }
            }
        }
        Ok((
            logits,
            ForwardCache {
                encoding,
                states,
                text_context,
            },
        ))
    }

    /// Teacher-forced logits for every step of `target`.
    pub fn forward(&self, record: &QueryRecord, target: &RankTarget) -> Result<LogitMatrix> {
        Ok(self.forward_cached(record, target)?.0)
    }

    /// Gradient of the loss with respect to every parameter, given
    /// `logit_grad = ∂L/∂z` for the logits of [`PointerModel::forward`].
    pub fn backward(
        &self,
        record: &QueryRecord,
        target: &RankTarget,
        logit_grad: &LogitMatrix,
    ) -> Result<ParameterGradient> {
        let (logits, cache) = self.forward_cached(record, target)?;
        if logit_grad.rows() != logits.rows() || logit_grad.cols() != logits.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", logits.rows(), logits.cols()),
                actual: format!("{}x{}", logit_grad.rows(), logit_grad.cols()),
            });
        }
        Ok(self.backward_cached(target, logit_grad, &cache))
    }

    /// Forward, loss and backward in one pass.
    pub fn loss_and_grad(
        &self,
        record: &QueryRecord,
        target: &RankTarget,
    ) -> Result<(LossReport, ParameterGradient)> {
        let (logits, cache) = self.forward_cached(record, target)?;
        let report = sequence_loss(&logits, target)?;
        let grad = self.backward_cached(target, &report.grad, &cache);
        Ok((report, grad))
    }

    fn backward_cached(
        &self,
        target: &RankTarget,
        g: &LogitMatrix,
        cache: &ForwardCache,
    ) -> ParameterGradient {
        let d = self.dims.d;
        let f = self.dims.feature_dim;
        let sh = &self.shapes;
        let layout = self.vocab.layout();
        let enc = &cache.encoding;
        let n = enc.n;
        let mut grad = vec![0.0; sh.total];

        let mut d_state = vec![vec![0.0; d]; cache.states.len()];
        let mut d_enc = vec![vec![0.0; d]; n];
        let mut d_endlist = vec![0.0; d];

        let pointer_rows = target
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == StepKind::Pointer)
            .map(|(t, _)| t);
        for (k, t) in pointer_rows.enumerate() {
            let s = &cache.states[k];
            let row = g.row(t);
            for m in 1..=n {
                let gm = row[layout.cand(m)];
                if gm != 0.0 {
                    axpy(&mut d_state[k], gm, enc.candidate(m));
                    axpy(&mut d_enc[m - 1], gm, s);
                }
            }
            let ge = row[ENDLIST];
            if ge != 0.0 {
                axpy(&mut d_state[k], ge, self.p(&sh.endlist));
                axpy(&mut d_endlist, ge, s);
            }
        }
        grad[sh.endlist.clone()].copy_from_slice(&d_endlist);

        // Recurrence, last transition first.
        for k in (0..cache.states.len() - 1).rev() {
            let m = target.permutation[k];
            let da = tanh_back(&d_state[k + 1], &cache.states[k + 1]);
            let mut x = cache.states[k].clone();
            x.extend_from_slice(enc.candidate(m));
            outer_acc(&mut grad[sh.wd.clone()], &da, &x);
            axpy(&mut grad[sh.bd.clone()], 1.0, &da);
            let mut dx = vec![0.0; 2 * d];
            matvec_t_acc(self.p(&sh.wd), 2 * d, &da, &mut dx);
            axpy(&mut d_state[k], 1.0, &dx[..d]);
            axpy(&mut d_enc[m - 1], 1.0, &dx[d..]);
        }

        let mut d_embed = vec![0.0; sh.embed.len()];
        let spread = |d_embed: &mut [f64], words: &[usize], du: &[f64]| {
            if words.is_empty() {
                return;
            }
            let inv = 1.0 / words.len() as f64;
            for &p in words {
                axpy(&mut d_embed[p * d..(p + 1) * d], inv, du);
            }
        };

        // Question encoder.
        let da = tanh_back(&d_state[0], &enc.s1);
        outer_acc(&mut grad[sh.wq.clone()], &da, &enc.question_mean);
        axpy(&mut grad[sh.bq.clone()], 1.0, &da);
        let mut dq = vec![0.0; d];
        matvec_t_acc(self.p(&sh.wq), d, &da, &mut dq);
        spread(&mut d_embed, &enc.question_words, &dq);

        // Candidate encoder.
        for (i, de) in d_enc.iter().enumerate() {
            if de.iter().all(|v| *v == 0.0) {
                continue;
            }
            let h = &enc.cand_hidden[i];
            outer_acc(&mut grad[sh.w2.clone()], de, h);
            axpy(&mut grad[sh.b2.clone()], 1.0, de);
            let mut dh = vec![0.0; d];
            matvec_t_acc(self.p(&sh.w2), d, de, &mut dh);
            let da1 = tanh_back(&dh, h);
            outer_acc(&mut grad[sh.w1.clone()], &da1, &enc.cand_input[i]);
            axpy(&mut grad[sh.b1.clone()], 1.0, &da1);
            let mut du = vec![0.0; d + f];
            matvec_t_acc(self.p(&sh.w1), d + f, &da1, &mut du);
            spread(&mut d_embed, &enc.cand_words[i], &du[..d]);
        }

        // Text head.
        for &(t, context) in &cache.text_context {
            let row = g.row(t);
            axpy(&mut grad[sh.bt.clone()], 1.0, row);
            if let Some(p) = context {
                outer_acc(&mut grad[sh.wt.clone()], row, self.embed_row(p));
                let mut dc = vec![0.0; d];
                matvec_t_acc(self.p(&sh.wt), d, row, &mut dc);
                axpy(&mut d_embed[p * d..(p + 1) * d], 1.0, &dc);
            }
        }

        grad[sh.embed.clone()].copy_from_slice(&d_embed);
        ParameterGradient(grad)
    }
}

impl PointerPolicy for PointerModel {
    type State = PointerState;

    fn layout(&self) -> Layout {
        self.vocab.layout()
    }

    fn start(&self, record: &QueryRecord) -> Result<PointerState> {
        let encoding = self.encode(record)?;
        Ok(PointerState {
            hidden: encoding.s1.clone(),
            encoding: Arc::new(encoding),
            selected: Vec::new(),
        })
    }

    fn pointer_row(&self, state: &PointerState) -> Vec<f64> {
        let mut row = vec![0.0; self.vocab.size()];
        self.fill_pointer_row(&mut row, &state.hidden, &state.encoding);
        row
    }

    fn advance(&self, state: &PointerState, id: usize) -> PointerState {
        let mut selected = state.selected.clone();
        selected.push(id);
        PointerState {
            hidden: self.step_state(&state.hidden, state.encoding.candidate(id)),
            encoding: Arc::clone(&state.encoding),
            selected,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{masked_softmax, RankWeights};
    use crate::synth::{synth_generate, SynthSpec};
    use crate::target::{build_rank_target, SimilarityScorer};

    fn setup(n: usize, aux_text: bool) -> (Vec<QueryRecord>, ModelDims, Vocabulary) {
        let corpus = synth_generate(&SynthSpec {
            n_queries: 4,
            n_candidates: n,
            feature_dim: 3,
            noise_sigma: 0.0,
            seed: 7,
        })
        .unwrap();
        let vocab = Vocabulary::build(&corpus, 6).unwrap();
        let dims = ModelDims {
            d: 6,
            feature_dim: 3,
            aux_text,
        };
        (corpus, dims, vocab)
    }

    fn target(model: &PointerModel, record: &QueryRecord) -> RankTarget {
        build_rank_target(
            record,
            SimilarityScorer::Precomputed,
            &RankWeights::default(),
            model.vocab().layout(),
        )
        .unwrap()
    }

    #[test]
    fn zero_model_is_uniform_over_each_mask() {
        let (corpus, dims, vocab) = setup(4, false);
        let model = PointerModel::zeros(dims, vocab);
        let t = target(&model, &corpus[0]);
        let logits = model.forward(&corpus[0], &t).unwrap();
        for (i, step) in t.pointer_steps() {
            let p = masked_softmax(logits.row(i), &step.mask).unwrap();
            for &c in &step.mask {
                assert!((p[c] - 1.0 / step.mask.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_follow_candidate_relabelling() {
        let (corpus, dims, vocab) = setup(3, false);
        let model = PointerModel::new(dims, vocab, 3);
        let rec = &corpus[0];
        let mut swapped = rec.clone();
        swapped.candidates.swap(0, 1);
        swapped.candidates[0].id = 1;
        swapped.candidates[1].id = 2;
        let layout = model.vocab().layout();
        let a = model.pointer_row(&model.start(rec).unwrap());
        let b = model.pointer_row(&model.start(&swapped).unwrap());
        assert!((a[layout.cand(1)] - b[layout.cand(2)]).abs() < 1e-12);
        assert!((a[layout.cand(2)] - b[layout.cand(1)]).abs() < 1e-12);
        assert!((a[layout.cand(3)] - b[layout.cand(3)]).abs() < 1e-12);
        assert!((a[ENDLIST] - b[ENDLIST]).abs() < 1e-12);
    }

    #[test]
    fn single_candidate_ends_with_certain_endlist() {
        let (corpus, dims, vocab) = setup(1, false);
        let model = PointerModel::new(dims, vocab, 1);
        let t = target(&model, &corpus[0]);
        let logits = model.forward(&corpus[0], &t).unwrap();
        let last = t.steps.len() - 1;
        let p = masked_softmax(logits.row(last), &t.steps[last].mask).unwrap();
        assert_eq!(p[ENDLIST], 1.0);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let (corpus, dims, vocab) = setup(3, true);
        let model = PointerModel::new(dims, vocab, 2);
        let t = target(&model, &corpus[1]);
        let logits = model.forward(&corpus[1], &t).unwrap();
        let g = LogitMatrix::zeros(logits.rows(), logits.cols());
        let grad = model.backward(&corpus[1], &t, &g).unwrap();
        assert!(grad.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unused_pointer_columns_get_no_gradient() {
        let (corpus, dims, vocab) = setup(3, false);
        let model = PointerModel::new(dims, vocab, 5);
        let t = target(&model, &corpus[0]);
        let (report, _) = model.loss_and_grad(&corpus[0], &t).unwrap();
        let layout = model.vocab().layout();
        for r in 0..report.grad.rows() {
            for m in 4..=layout.n_max {
                assert_eq!(report.grad.get(r, layout.cand(m)), 0.0);
            }
        }
    }

    #[test]
    fn bad_logit_gradient_shape_is_rejected() {
        let (corpus, dims, vocab) = setup(2, false);
        let model = PointerModel::new(dims, vocab, 0);
        let t = target(&model, &corpus[0]);
        let g = LogitMatrix::zeros(1, 1);
        assert!(matches!(
            model.backward(&corpus[0], &t, &g),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, dims, vocab) = setup(2, true);
        let a = PointerModel::new(dims, vocab.clone(), 11);
        let b = PointerModel::new(dims, vocab.clone(), 11);
        let c = PointerModel::new(dims, vocab, 12);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.params().iter().all(|x| x.abs() < INIT_SCALE));
    }

    #[test]
    fn initial_loss_is_near_log_mask_size() {
        let (corpus, dims, vocab) = setup(5, false);
        let model = PointerModel::new(dims, vocab, 4);
        let t = target(&model, &corpus[2]);
        let (report, _) = model.loss_and_grad(&corpus[2], &t).unwrap();
        let (num, den) = t.pointer_steps().fold((0.0, 0.0), |(n, d), (_, s)| {
            (n + s.weight * (s.mask.len() as f64).ln(), d + s.weight)
        });
        let expected = num / den;
        assert!((report.total - expected).abs() < 0.2 * expected);
    }

    #[test]
    fn feature_length_mismatch_is_reported() {
        let (mut corpus, dims, vocab) = setup(2, false);
        let model = PointerModel::new(dims, vocab, 0);
        corpus[0].candidates[0].features = Some(vec![1.0]);
        assert!(matches!(
            model.encode(&corpus[0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
