//! Command-line front end: `synth`, `build-targets`, `train`, `rerank`,
//! `eval` and `gradcheck`.
//!
//! Every subcommand accepts `--config FILE` with flat `key = value` lines.
//! Keys are the long flag names with `_` or `-`; a flag given on the command
//! line wins over the file. Exit codes: 0 on success, 1 for usage and
//! validation errors, 2 for internal failures.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::audit::{logit_audit, parameter_audit};
use crate::checkpoint::Checkpoint;
use crate::decode::{decode, DecodeOptions};
use crate::error::{Error, Result};
use crate::io::{
    apply_similarity_table, load_config, load_queries, read_run, run_orders, vocab_path,
    write_queries, write_run, write_string, RunEntry,
};
use crate::loss::RankWeights;
use crate::model::{ModelDims, PointerModel, DEFAULT_DIM};
use crate::optim::OptimizerKind;
use crate::record::QueryRecord;
use crate::synth::{synth_generate, SynthSpec};
use crate::target::{build_rank_target, parse_sequence, render_sequence, SimilarityScorer};
use crate::train::{
    evaluate_orders, format_log, split_corpus, train, Schedule, TrainConfig, DEFAULT_TRAIN_FRACTION,
};
use crate::vocab::{Vocabulary, DEFAULT_N_MAX};

/// Logit-level audit must stay below this relative error.
pub const LOGIT_AUDIT_TOLERANCE: f64 = 1e-4;
/// Parameter-level audit must stay below this relative error.
pub const PARAM_AUDIT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "ptrrank",
    version,
    about = "Listwise reranking of generated answers with a pointer network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic query corpus as JSONL.
    Synth(SynthArgs),
    /// Dump the rendered target sequence, masks and weights of every query.
    BuildTargets(TargetArgs),
    /// Fit a model and write a checkpoint, its vocabulary and a training log.
    Train(TrainArgs),
    /// Rank the candidates of every query and write a run file.
    Rerank(RerankArgs),
    /// Score a run file or decoded sequences against the queries.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of queries [default: 100]
    #[arg(long)]
    queries: Option<usize>,
    /// Candidates per query [default: 4]
    #[arg(long)]
    candidates: Option<usize>,
    /// Feature dimension [default: 4]
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Standard deviation of the quality noise [default: 0]
    #[arg(long)]
    noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TargetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input JSONL queries.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tab-separated similarity table (query, candidate, scorer, score).
    #[arg(long)]
    similarities: Option<PathBuf>,
    /// token_f1, rouge_l, precomputed or auto [default: auto]
    #[arg(long)]
    scorer: Option<String>,
    /// Comma-separated rank weights for ranks 1, 2, ... [default: 3,1.5,1.2]
    #[arg(long)]
    alpha: Option<String>,
    /// Largest candidate count the vocabulary reserves pointers for [default: 10]
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input JSONL queries; the first 90% train, the rest are held out.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Checkpoint path. The vocabulary is written to `<path>.vocab`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log path [default: <out>.log]
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    similarities: Option<PathBuf>,
    /// token_f1, rouge_l, precomputed or auto [default: auto]
    #[arg(long)]
    scorer: Option<String>,
    /// [default: 3,1.5,1.2]
    #[arg(long)]
    alpha: Option<String>,
    /// [default: 10]
    #[arg(long)]
    n_max: Option<usize>,
    /// Hidden size [default: 32]
    #[arg(long)]
    dim: Option<usize>,
    /// Base learning rate [default: 0.003]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// constant or cosine [default: cosine]
    #[arg(long)]
    schedule: Option<String>,
    /// sgd or adam [default: adam]
    #[arg(long)]
    optimizer: Option<String>,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds initialisation and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of queries used for training [default: 0.9]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Also predict the question words (auxiliary text head).
    #[arg(long)]
    text_head: bool,
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Output run file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Beam width; 1 is greedy [default: 1]
    #[arg(long)]
    beam: Option<usize>,
    /// System name written in the last run column [default: ptrrank]
    #[arg(long)]
    tag: Option<String>,
    /// Let the model stop before every candidate is ranked.
    #[arg(long)]
    early_stop: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Run file to score.
    #[arg(long)]
    run: Option<PathBuf>,
    /// JSONL of {"query_id", "output"} with rendered rank sequences.
    #[arg(long)]
    decoded: Option<PathBuf>,
    #[arg(long)]
    similarities: Option<PathBuf>,
    /// [default: auto]
    #[arg(long)]
    scorer: Option<String>,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random instances for the logit audit [default: 50]
    #[arg(long)]
    instances: Option<usize>,
    /// Central-difference step [default: 1e-4]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Hidden size of the audited model [default: 4]
    #[arg(long)]
    dim: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

/// Config-file values with command-line overrides. Keys the subcommand does
/// not know are rejected.
struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => load_config(p)?,
            None => BTreeMap::new(),
        };
        Ok(Settings {
            file,
            used: BTreeSet::new(),
        })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.file.get(key).cloned()
    }

    fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let from_file = self.raw(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value {v:?} for '{key}'"))),
            None => Ok(None),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?.ok_or_else(|| {
            Error::Config(format!(
                "missing required setting --{}",
                key.replace('_', "-")
            ))
        })
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        Ok(flag || self.get::<bool>(key, None)?.unwrap_or(false))
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<_> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }
}

fn parse_alpha(s: &str) -> Result<RankWeights> {
    let alpha = s
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad rank weight {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    RankWeights::new(alpha)
}

fn pick_scorer(name: &str, corpus: &[QueryRecord]) -> Result<SimilarityScorer> {
    if name == "auto" {
        Ok(SimilarityScorer::auto(corpus))
    } else {
        name.parse()
    }
}

fn load_corpus(
    s: &mut Settings,
    queries: Option<PathBuf>,
    sims: Option<PathBuf>,
) -> Result<Vec<QueryRecord>> {
    let path: PathBuf = s.require("queries", queries)?;
    let mut corpus = load_queries(&path)?;
    if let Some(t) = s.get("similarities", sims)? {
        apply_similarity_table(&mut corpus, &t)?;
    }
    if corpus.is_empty() {
        return Err(Error::InvalidRecord(format!(
            "{} contains no queries",
            path.display()
        )));
    }
    Ok(corpus)
}

fn feature_dim(corpus: &[QueryRecord]) -> usize {
    corpus
        .iter()
        .flat_map(|r| &r.candidates)
        .find_map(|c| c.features.as_ref().map(Vec::len))
        .unwrap_or(0)
}

fn cmd_synth(a: SynthArgs, out: &mut String) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_queries: s.or("queries", a.queries, d.n_queries)?,
        n_candidates: s.or("candidates", a.candidates, d.n_candidates)?,
        feature_dim: s.or("feature_dim", a.feature_dim, d.feature_dim)?,
        noise_sigma: s.or("noise", a.noise, d.noise_sigma)?,
        seed: s.or("seed", a.seed, d.seed)?,
    };
    let path: PathBuf = s.require("out", a.out)?;
    s.finish()?;
    let corpus = synth_generate(&spec)?;
    write_queries(&corpus, &path)?;
    let _ = writeln!(out, "wrote {} queries to {}", corpus.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TargetLine<'a> {
    query_id: &'a str,
    sequence: String,
    permutation: &'a [usize],
    similarities: &'a [f64],
    tokens: Vec<String>,
    masks: Vec<Vec<usize>>,
    weights: Vec<f64>,
}

fn cmd_build_targets(a: TargetArgs, out: &mut String) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let corpus = load_corpus(&mut s, a.queries, a.similarities)?;
    let scorer = pick_scorer(&s.or("scorer", a.scorer, "auto".to_string())?, &corpus)?;
    let weights = match s.get::<String>("alpha", a.alpha)? {
        Some(v) => parse_alpha(&v)?,
        None => RankWeights::default(),
    };
    let n_max = s.or("n_max", a.n_max, DEFAULT_N_MAX)?;
    let path: PathBuf = s.require("out", a.out)?;
    s.finish()?;
    let layout = Vocabulary::build(&corpus, n_max)?.layout();
    let mut text = String::new();
    for record in &corpus {
        let t = build_rank_target(record, scorer, &weights, layout)?;
        let line = TargetLine {
            query_id: &record.query_id,
            sequence: render_sequence(&t.permutation),
            permutation: &t.permutation,
            similarities: &t.sims,
            tokens: t.tokens().iter().map(ToString::to_string).collect(),
            masks: t.steps.iter().map(|st| st.mask.clone()).collect(),
            weights: t.weights(),
        };
        text.push_str(&serde_json::to_string(&line).map_err(|e| Error::Parse(e.to_string()))?);
        text.push('\n');
    }
    write_string(&path, &text)?;
    let _ = writeln!(
        out,
        "wrote {} targets to {} (scorer {scorer})",
        corpus.len(),
        path.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut String) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let corpus = load_corpus(&mut s, a.queries, a.similarities)?;
    let d = TrainConfig::default();
    let scorer = pick_scorer(&s.or("scorer", a.scorer, "auto".to_string())?, &corpus)?;
    let weights = match s.get::<String>("alpha", a.alpha)? {
        Some(v) => parse_alpha(&v)?,
        None => d.weights.clone(),
    };
    let schedule: Schedule = s
        .or("schedule", a.schedule, d.schedule.to_string())?
        .parse()?;
    let optimizer: OptimizerKind = s
        .or("optimizer", a.optimizer, d.optimizer.to_string())?
        .parse()?;
    let config = TrainConfig {
        learning_rate: s.or("learning_rate", a.learning_rate, d.learning_rate)?,
        batch_size: s.or("batch_size", a.batch_size, d.batch_size)?,
        epochs: s.or("epochs", a.epochs, d.epochs)?,
        seed: s.or("seed", a.seed, d.seed)?,
        optimizer,
        weights,
        scorer,
        schedule,
    };
    let n_max = s.or("n_max", a.n_max, DEFAULT_N_MAX)?;
    let dims = ModelDims {
        d: s.or("dim", a.dim, DEFAULT_DIM)?,
        feature_dim: feature_dim(&corpus),
        aux_text: s.switch("text_head", a.text_head)?,
    };
    let fraction = s.or("train_fraction", a.train_fraction, DEFAULT_TRAIN_FRACTION)?;
    let ckpt: PathBuf = s.require("out", a.out)?;
    let log = s.get("log", a.log)?.unwrap_or_else(|| {
        let mut p = ckpt.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    });
    s.finish()?;
    config.validate()?;
    if dims.d == 0 {
        return Err(Error::Config("dim must be at least 1".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1], got {fraction}"
        )));
    }

    let vocab = Vocabulary::build(&corpus, n_max)?;
    let (train_set, heldout) = split_corpus(&corpus, fraction);
    let model = PointerModel::new(dims, vocab.clone(), config.seed);
    let outcome = train(model, &train_set, &heldout, &config)?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        step_count: outcome.steps,
        optimizer: outcome.optimizer,
    };
    checkpoint.save(&ckpt)?;
    write_string(vocab_path(&ckpt), &vocab.to_text())?;
    write_string(&log, &format_log(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        let _ = writeln!(out, "epoch\tloss\ttau\tndcg\n{}", last.log_line());
    }
    let _ = writeln!(
        out,
        "trained on {} queries ({} held out), {} steps; checkpoint {}",
        train_set.len(),
        heldout.len(),
        outcome.steps,
        ckpt.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let vp = vocab_path(path);
    let text = std::fs::read_to_string(&vp)
        .map_err(|e| Error::io(format!("reading {}", vp.display()), e))?;
    Checkpoint::load(path, Vocabulary::from_text(&text)?)
}

fn cmd_rerank(a: RerankArgs, out: &mut String) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let ckpt: PathBuf = s.require("checkpoint", a.checkpoint)?;
    let corpus = load_corpus(&mut s, a.queries, None)?;
    let options = DecodeOptions {
        beam: s.or("beam", a.beam, 1)?,
        allow_early_stop: s.switch("early_stop", a.early_stop)?,
    };
    let tag = s.or("tag", a.tag, "ptrrank".to_string())?;
    let path: PathBuf = s.require("out", a.out)?;
    s.finish()?;
    if options.beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let model = load_checkpoint(&ckpt)?.model;
    let mut entries = Vec::new();
    for record in &corpus {
        let ranking = decode(&model, record, options)?;
        for (i, (&id, score)) in ranking.ids.iter().zip(ranking.prefix_scores()).enumerate() {
            entries.push(RunEntry {
                query_id: record.query_id.clone(),
                candidate_id: id,
                rank: i + 1,
                score,
                tag: tag.clone(),
            });
        }
    }
    write_run(&entries, &path)?;
    let _ = writeln!(
        out,
        "ranked {} queries into {}",
        corpus.len(),
        path.display()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodedLine {
    query_id: String,
    output: String,
}

fn read_decoded(path: &Path, corpus: &[QueryRecord]) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let sizes: BTreeMap<&str, usize> = corpus
        .iter()
        .map(|r| (r.query_id.as_str(), r.n()))
        .collect();
    let mut orders = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::ParseAt {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let d: DecodedLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let n = *sizes
            .get(d.query_id.as_str())
            .ok_or_else(|| at(format!("unknown query {}", d.query_id)))?;
        let order = parse_sequence(&d.output, n).map_err(|e| at(e.to_string()))?;
        if orders.insert(d.query_id.clone(), order).is_some() {
            return Err(Error::DuplicateQueryId(d.query_id));
        }
    }
    Ok(orders)
}

fn cmd_eval(a: EvalArgs, out: &mut String) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let corpus = load_corpus(&mut s, a.queries, a.similarities)?;
    let scorer = pick_scorer(&s.or("scorer", a.scorer, "auto".to_string())?, &corpus)?;
    let run: Option<PathBuf> = s.get("run", a.run)?;
    let decoded: Option<PathBuf> = s.get("decoded", a.decoded)?;
    s.finish()?;
    let mut by_query = match (run, decoded) {
        (Some(r), None) => run_orders(&read_run(&r)?),
        (None, Some(d)) => read_decoded(&d, &corpus)?,
        _ => {
            return Err(Error::Config(
                "give exactly one of --run or --decoded".into(),
            ))
        }
    };
    let mut orders = Vec::with_capacity(corpus.len());
    for record in &corpus {
        let order = by_query.remove(&record.query_id).ok_or_else(|| {
            Error::InvariantViolation(format!("no ranking for query {}", record.query_id))
        })?;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (1..=record.n()).collect::<Vec<_>>() {
            return Err(Error::InvariantViolation(format!(
                "ranking for query {} is not a permutation of 1..{}",
                record.query_id,
                record.n()
            )));
        }
        orders.push(order);
    }
    if let Some(extra) = by_query.keys().next() {
        return Err(Error::InvariantViolation(format!(
            "ranking for unknown query {extra}"
        )));
    }
    let report = evaluate_orders(&corpus, &orders, scorer)?;
    let _ = write!(out, "{report}");
    Ok(())
}

fn cmd_gradcheck(a: GradArgs, out: &mut String) -> Result<bool> {
    let mut s = Settings::load(a.config.as_deref())?;
    let instances = s.or("instances", a.instances, 50)?;
    let eps = s.or("epsilon", a.epsilon, 1e-4)?;
    let d = s.or("dim", a.dim, 4)?;
    let seed = s.or("seed", a.seed, 0)?;
    s.finish()?;
    if instances == 0 || d == 0 || eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(
            "instances and dim must be positive, epsilon > 0".into(),
        ));
    }
    let logit = logit_audit(instances, eps, seed)?;
    let mut param = parameter_audit(d, 3, false, eps, seed)?;
    let with_text = parameter_audit(d, 3, true, eps, seed)?;
    if with_text.max_rel_err > param.max_rel_err {
        param = with_text;
    }
    let _ = writeln!(
        out,
        "logit audit:     {} coordinates, max_rel_err {:.3e} (worst {})",
        logit.coordinates, logit.max_rel_err, logit.worst
    );
    let _ = writeln!(
        out,
        "parameter audit: {} coordinates, max_rel_err {:.3e} (worst {})",
        param.coordinates, param.max_rel_err, param.worst
    );
    let max = logit.max_rel_err.max(param.max_rel_err);
    let _ = writeln!(out, "max_rel_err {max:.3e}");
    Ok(logit.max_rel_err < LOGIT_AUDIT_TOLERANCE && param.max_rel_err < PARAM_AUDIT_TOLERANCE)
}

/// Runs the command line and returns the process exit code. Normal output is
/// written to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (code, stdout, stderr) = run_captured(argv);
    print!("{stdout}");
    eprint!("{stderr}");
    code
}

/// Like [`run`] but returns `(exit code, stdout, stderr)` instead of printing.
pub fn run_captured<I, T>(argv: I) -> (i32, String, String)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                (1, String::new(), text)
            } else {
                (0, text, String::new())
            };
        }
    };
    let mut out = String::new();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, &mut out).map(|_| true),
        Command::BuildTargets(a) => cmd_build_targets(a, &mut out).map(|_| true),
        Command::Train(a) => cmd_train(a, &mut out).map(|_| true),
        Command::Rerank(a) => cmd_rerank(a, &mut out).map(|_| true),
        Command::Eval(a) => cmd_eval(a, &mut out).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut out),
    };
    match result {
        Ok(true) => (0, out, String::new()),
        Ok(false) => (
            2,
            out,
            "error: gradient audit exceeded its tolerance\n".into(),
        ),
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            (code, out, format!("error: {e}\n"))
        }
    }
}
