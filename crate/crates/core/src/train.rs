//! Training loop and held-out evaluation for [`PointerModel`].

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decode::{decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::loss::RankWeights;
use crate::metrics::{report, MetricReport, RankedList};
use crate::model::{ParameterGradient, PointerModel};
use crate::optim::{AdamState, Optimizer, OptimizerKind};
use crate::record::QueryRecord;
use crate::target::{build_rank_target, RankTarget, SimilarityScorer};

/// Hyperparameters of the full-scale LoRA fine-tune of a 7B backbone. They
/// do not move a from-scratch model of this size and are not the defaults.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-6;
pub const FULL_SCALE_BATCH_SIZE: usize = 1;
pub const FULL_SCALE_EPOCHS: usize = 5;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.9;
/// Base rate for the small from-scratch model, decayed by [`Schedule::Cosine`].
pub const DEFAULT_LEARNING_RATE: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weights: RankWeights,
    pub scorer: SimilarityScorer,
    pub schedule: Schedule,
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate at epoch 1 toward zero after the last epoch.
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate for a 1-based `epoch` out of `epochs`.
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = epoch.saturating_sub(1) as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 1,
            epochs: 30,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            weights: RankWeights::default(),
            scorer: SimilarityScorer::Precomputed,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub heldout: Option<MetricReport>,
}

impl EpochStats {
    /// Tab-separated log line: epoch, mean loss, held-out tau, held-out nDCG.
    pub fn log_line(&self) -> String {
        let (tau, ndcg) = self
            .heldout
            .as_ref()
            .map_or(("nan".to_string(), "nan".to_string()), |m| {
                (format!("{:.6}", m.kendall_tau), format!("{:.6}", m.ndcg))
            });
        format!("{}\t{:.6}\t{}\t{}", self.epoch, self.mean_loss, tau, ndcg)
    }
}

pub fn format_log(history: &[EpochStats]) -> String {
    let mut out = String::new();
    for e in history {
        let _ = writeln!(out, "{}", e.log_line());
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PointerModel,
    pub history: Vec<EpochStats>,
    pub steps: u64,
    pub optimizer: Option<AdamState>,
}

/// Splits off the last `1 - train_fraction` of the corpus for evaluation.
pub fn split_corpus(
    corpus: &[QueryRecord],
    train_fraction: f64,
) -> (Vec<QueryRecord>, Vec<QueryRecord>) {
    let n_train = ((corpus.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1.min(corpus.len()), corpus.len());
    (corpus[..n_train].to_vec(), corpus[n_train..].to_vec())
}

/// Target for one record, with text steps for the question when the model
/// has a text head.
pub fn target_for(
    model: &PointerModel,
    record: &QueryRecord,
    scorer: SimilarityScorer,
    weights: &RankWeights,
) -> Result<RankTarget> {
    let target = build_rank_target(record, scorer, weights, model.vocab().layout())?;
    Ok(if model.dims().aux_text {
        let words = model.vocab().text_positions(&record.question);
        target.with_text_prefix(&words)
    } else {
        target
    })
}

pub struct Trainer {
    model: PointerModel,
    optimizer: Optimizer,
    config: TrainConfig,
    steps: u64,
}

impl Trainer {
    pub fn new(model: PointerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer =
            Optimizer::new(config.optimizer, config.learning_rate, model.params().len());
        Ok(Trainer {
            model,
            optimizer,
            config,
            steps: 0,
        })
    }

    /// Continues from a saved optimizer state and step count.
    pub fn resume(mut self, state: Option<AdamState>, steps: u64) -> Self {
        self.optimizer = self.optimizer.with_state(state);
        self.steps = steps;
        self
    }

    pub fn model(&self) -> &PointerModel {
        &self.model
    }

    /// One optimizer step on the mean gradient of `batch`. Returns the mean loss.
    pub fn step(&mut self, batch: &[(&QueryRecord, &RankTarget)]) -> Result<f64> {
        let mut total = ParameterGradient(vec![0.0; self.model.params().len()]);
        let mut loss = 0.0;
        for (record, target) in batch {
            let (report, grad) = self.model.loss_and_grad(record, target)?;
            loss += report.total;
            total.add_assign(&grad);
        }
        let scale = 1.0 / batch.len() as f64;
        total.scale(scale);
        let loss = loss * scale;
        if !loss.is_finite() || total.0.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                step: self.steps as usize,
                last_good: Box::new(self.model.clone()),
            });
        }
        let before = self.model.params().to_vec();
        self.optimizer.step(self.model.params_mut(), &total.0);
        if self.model.params().iter().any(|p| !p.is_finite()) {
            self.model.params_mut().copy_from_slice(&before);
            return Err(Error::NonFiniteLoss {
                epoch: 0,
                step: self.steps as usize,
                last_good: Box::new(self.model.clone()),
            });
        }
        self.steps += 1;
        Ok(loss)
    }

    /// Runs `config.epochs` passes over `train`, evaluating on `heldout`
    /// after each epoch when it is non-empty.
    pub fn fit(mut self, train: &[QueryRecord], heldout: &[QueryRecord]) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let targets = train
            .iter()
            .map(|r| target_for(&self.model, r, self.config.scorer, &self.config.weights))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            let lr =
                self.config
                    .schedule
                    .rate(self.config.learning_rate, epoch, self.config.epochs);
            self.optimizer.set_learning_rate(lr);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<_> = chunk.iter().map(|&i| (&train[i], &targets[i])).collect();
                let loss = self.step(&batch).map_err(|e| match e {
                    Error::NonFiniteLoss {
                        step, last_good, ..
                    } => Error::NonFiniteLoss {
                        epoch,
                        step,
                        last_good,
                    },
                    Error::NonFiniteLogit { .. } => Error::NonFiniteLoss {
                        epoch,
                        step: self.steps as usize,
                        last_good: Box::new(self.model.clone()),
                    },
                    e => e,
                })?;
                loss_sum += loss * chunk.len() as f64;
            }
            let heldout_report = if heldout.is_empty() {
                None
            } else {
                Some(evaluate_ranking(
                    &self.model,
                    heldout,
                    self.config.scorer,
                    DecodeOptions::greedy(),
                )?)
            };
            history.push(EpochStats {
                epoch,
                mean_loss: loss_sum / train.len() as f64,
                heldout: heldout_report,
            });
        }
        Ok(TrainOutcome {
            steps: self.steps,
            optimizer: self.optimizer.state().cloned(),
            model: self.model,
            history,
        })
    }
}

pub fn train(
    model: PointerModel,
    train: &[QueryRecord],
    heldout: &[QueryRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, config.clone())?.fit(train, heldout)
}

/// Decodes every record and scores the output against the
/// similarity-derived ideal order.
pub fn evaluate_ranking(
    model: &PointerModel,
    corpus: &[QueryRecord],
    scorer: SimilarityScorer,
    options: DecodeOptions,
) -> Result<MetricReport> {
    let mut rankings = Vec::with_capacity(corpus.len());
    for record in corpus {
        let ranking = decode(model, record, options)?;
        rankings.push(ranking.ids);
    }
    evaluate_orders(corpus, &rankings, scorer)
}

/// Scores fixed system orders (one per record) against the ideal orders.
pub fn evaluate_orders(
    corpus: &[QueryRecord],
    orders: &[Vec<usize>],
    scorer: SimilarityScorer,
) -> Result<MetricReport> {
    if corpus.len() != orders.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rankings", corpus.len()),
            actual: orders.len().to_string(),
        });
    }
    let mut ideals = Vec::with_capacity(corpus.len());
    for record in corpus {
        let layout = crate::vocab::Layout::new(record.n(), 0);
        ideals.push(build_rank_target(
            record,
            scorer,
            &RankWeights::uniform(),
            layout,
        )?);
    }
    let lists: Vec<RankedList<'_>> = corpus
        .iter()
        .zip(orders)
        .zip(&ideals)
        .map(|((record, system), ideal)| RankedList {
            system,
            ideal: &ideal.permutation,
            sims: &ideal.sims,
            top_text: system
                .first()
                .and_then(|&id| record.candidate(id))
                .map(|c| c.text.as_str()),
            reference: record.reference.as_deref(),
        })
        .collect();
    report(&lists)
}
