//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use itertools::Itertools;
use ptrrank::audit::{logit_audit, parameter_audit};
use ptrrank::cli::run_captured;
use ptrrank::decode::{decode, permutation_log_prob, step_distribution, DecodeOptions};
use ptrrank::loss::{masked_softmax, sequence_loss, weighted_mean, LogitMatrix, RankWeights};
use ptrrank::metrics::{kendall_tau, meteor_exact, ndcg, rouge_l};
use ptrrank::model::{ModelDims, PointerModel, PointerPolicy};
use ptrrank::synth::{synth_generate, SynthSpec};
use ptrrank::target::{build_rank_target, RankTarget, SimilarityScorer, StepKind};
use ptrrank::train::{evaluate_ranking, target_for, train, Schedule, TrainConfig, Trainer};
use ptrrank::vocab::{Vocabulary, ENDLIST};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_model, random_record, tradeoff_fixture};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let logit = logit_audit(50, 1e-4, 0).map_err(|e| e.to_string())?;
    let mut param = 0.0f64;
    for aux_text in [false, true] {
        let r = parameter_audit(4, 3, aux_text, 1e-4, 0).map_err(|e| e.to_string())?;
        param = param.max(r.max_rel_err);
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "logit max_rel_err {:.2e} over 50 instances, parameter max_rel_err {:.2e} at d=4, {:.2?}",
        logit.max_rel_err, param, elapsed
    );
    check(
        logit.max_rel_err < 1e-4,
        format!("logit audit too large: {detail}"),
    )?;
    check(param < 1e-3, format!("parameter audit too large: {detail}"))?;
    check(
        elapsed < Duration::from_secs(10),
        format!("too slow: {detail}"),
    )?;
    Ok(detail)
}

/// Checks a decoded list is a duplicate-free selection from `1..=n`.
fn valid_ids(n: usize, ids: &[usize], early: bool) -> Result<(), String> {
    check(
        ids.iter().all(|&id| (1..=n).contains(&id)),
        format!("off-range id in {ids:?} (N={n})"),
    )?;
    check(
        ids.iter().all_unique(),
        format!("duplicate pointer in {ids:?}"),
    )?;
    if !early {
        check(ids.len() == n, format!("incomplete list {ids:?} (N={n})"))?;
    }
    Ok(())
}

fn masking() -> Outcome {
    let layout_n_max = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut steps = 0usize;
    let mut worst_sum = 0.0f64;
    for i in 0..1000u64 {
        let model = random_model(layout_n_max, i % 17);
        let n = rng.random_range(1..=layout_n_max);
        let record = random_record(n, 10_000 + i);
        let early = i % 3 == 0;
        let options = DecodeOptions {
            beam: 1 + (i % 4) as usize,
            allow_early_stop: early,
        };
        let ranking = decode(&model, &record, options).map_err(|e| e.to_string())?;
        valid_ids(n, &ranking.ids, early)?;
        let layout = model.layout();
        let mut state = model.start(&record).map_err(|e| e.to_string())?;
        for k in 0..=ranking.ids.len() {
            let selected = &ranking.ids[..k];
            let (mask, probs) =
                step_distribution(&model, &state, n, selected, early).map_err(|e| e.to_string())?;
            for (j, &p) in probs.iter().enumerate() {
                if !mask.contains(&j) {
                    check(p == 0.0, format!("mass {p} off the mask at column {j}"))?;
                }
            }
            for &id in selected {
                check(probs[layout.cand(id)] == 0.0, "selected candidate has mass")?;
            }
            let sum: f64 = probs.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            check(
                (sum - 1.0).abs() < 1e-9,
                format!("masked probabilities sum to {sum}"),
            )?;
            let chosen = ranking.ids.get(k).map_or(ENDLIST, |&id| layout.cand(id));
            check(
                probs[chosen] > 0.0,
                "decoder chose a zero-probability entry",
            )?;
            steps += 1;
            if let Some(&id) = ranking.ids.get(k) {
                state = model.advance(&state, id);
            }
        }
    }
    Ok(format!(
        "1000 decodes, {steps} steps replayed, max |sum-1| {worst_sum:.1e}"
    ))
}

fn brute_force() -> Outcome {
    let mut cases = 0;
    let mut worst_total = 0.0f64;
    for n in [3usize, 4] {
        let width: usize = (1..=n).product();
        for seed in 0..10u64 {
            let model = random_model(n, seed);
            let record = random_record(n, 500 + seed);
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut total = 0.0;
            for perm in (1..=n).permutations(n) {
                let lp = permutation_log_prob(&model, &record, &perm).map_err(|e| e.to_string())?;
                total += lp.exp();
                let better = match &best {
                    None => true,
                    Some((b, ids)) => lp > *b || (lp == *b && perm < *ids),
                };
                if better {
                    best = Some((lp, perm));
                }
            }
            let (best_lp, best_ids) = best.unwrap();
            let beam =
                decode(&model, &record, DecodeOptions::beam(width)).map_err(|e| e.to_string())?;
            check(
                beam.ids == best_ids,
                format!(
                    "N={n} seed {seed}: beam {:?} vs brute force {best_ids:?}",
                    beam.ids
                ),
            )?;
            check(
                (beam.log_prob - best_lp).abs() < 1e-12,
                format!("N={n} seed {seed}: log-prob {} vs {best_lp}", beam.log_prob),
            )?;
            worst_total = worst_total.max((total - 1.0).abs());
            check(
                (total - 1.0).abs() < 1e-8,
                format!("N={n} seed {seed}: total probability {total}"),
            )?;
            cases += 1;
        }
    }
    Ok(format!(
        "{cases} models at N=3 and N=4 agree with beam at width N!, max |sum p - 1| {worst_total:.1e}"
    ))
}

fn reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = random_model(5, 1);
    for trial in 0..20u64 {
        let n = rng.random_range(1..=5);
        let record = random_record(n, trial);
        let target = build_rank_target(
            &record,
            SimilarityScorer::Precomputed,
            &RankWeights::uniform(),
            model.layout(),
        )
        .map_err(|e| e.to_string())?;
        let mut logits = LogitMatrix::zeros(target.len(), model.layout().size());
        logits
            .as_mut_slice()
            .iter_mut()
            .for_each(|z| *z = rng.random_range(-3.0..3.0));
        let report = sequence_loss(&logits, &target).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = report
            .per_step
            .iter()
            .filter(|s| s.kind != StepKind::Marker)
            .map(|s| s.loss)
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        check(
            report.total == mean,
            format!("uniform weights: total {} vs mean {mean}", report.total),
        )?;
    }
    let hand = weighted_mean(&[1.0, 2.0], &[3.0, 1.0]).map_err(|e| e.to_string())?;
    check(
        hand == 1.25,
        format!("weights [3,1] over losses [1,2] gave {hand}"),
    )?;
    let w = RankWeights::default();
    let table: Vec<f64> = (1..=6).map(|k| w.weight(k)).collect();
    check(
        table == [3.0, 1.5, 1.2, 1.0, 1.0, 1.0],
        format!("rank weight table {table:?}"),
    )?;
    Ok("uniform total == mean on 20 sequences, [3,1]x[1,2] = 1.25, weights 3/1.5/1.2/1.0".into())
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let corpus = synth_generate(&SynthSpec {
        n_queries: 220,
        n_candidates: 4,
        feature_dim: 4,
        noise_sigma: 0.0,
        seed: 100,
    })
    .map_err(|e| e.to_string())?;
    let (train_set, heldout) = corpus.split_at(200);
    let vocab = Vocabulary::build(&corpus, 4).map_err(|e| e.to_string())?;
    let dims = ModelDims {
        d: 32,
        feature_dim: 4,
        aux_text: false,
    };
    let config = TrainConfig::default();
    let model = PointerModel::new(dims, vocab.clone(), config.seed);
    let outcome = train(model, train_set, heldout, &config).map_err(|e| e.to_string())?;
    let last = outcome
        .history
        .last()
        .and_then(|e| e.heldout.clone())
        .ok_or("no held-out report")?;
    let elapsed = start.elapsed();

    // Single-example overfit.
    let record = &corpus[0];
    let model = PointerModel::new(dims, vocab, 0);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        schedule: Schedule::Constant,
        ..TrainConfig::default()
    };
    let target = target_for(&model, record, cfg.scorer, &cfg.weights).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
    let mut overfit_steps = None;
    for step in 1..=500 {
        trainer
            .step(&[(record, &target)])
            .map_err(|e| e.to_string())?;
        let (report, _) = trainer
            .model()
            .loss_and_grad(record, &target)
            .map_err(|e| e.to_string())?;
        if report.total < 0.01 {
            overfit_steps = Some(step);
            break;
        }
    }

    let detail = format!(
        "held-out tau {:.3}, top-1 {:.3} after {} epochs in {:.2?}; overfit < 0.01 after {} steps",
        last.kendall_tau,
        last.top1_match,
        outcome.history.len(),
        elapsed,
        overfit_steps.map_or("more than 500".into(), |s| s.to_string())
    );
    check(last.kendall_tau >= 0.9, format!("tau too low: {detail}"))?;
    check(last.top1_match >= 0.95, format!("top-1 too low: {detail}"))?;
    check(
        outcome.history.len() <= 30,
        format!("too many epochs: {detail}"),
    )?;
    check(
        elapsed < Duration::from_secs(60),
        format!("too slow: {detail}"),
    )?;
    check(overfit_steps.is_some(), format!("overfit failed: {detail}"))?;
    Ok(detail)
}

fn rank1_share(target: &RankTarget) -> f64 {
    let (_, step) = target
        .pointer_steps()
        .find(|(_, s)| s.rank == Some(1))
        .unwrap();
    let total: f64 = target.weights().iter().sum();
    step.weight / total
}

fn rank_weight_effect() -> Outcome {
    let corpus = tradeoff_fixture(400, 0);
    let (train_set, test_set) = corpus.split_at(200);
    let vocab = Vocabulary::build(&corpus, 4).map_err(|e| e.to_string())?;
    let dims = ModelDims {
        d: 1,
        feature_dim: 2,
        aux_text: false,
    };
    let mut top1 = Vec::new();
    for alpha1 in [1.0, 3.0] {
        let config = TrainConfig {
            epochs: 10,
            weights: RankWeights::new(vec![alpha1, 1.0, 1.0]).map_err(|e| e.to_string())?,
            ..TrainConfig::default()
        };
        let model = PointerModel::new(dims, vocab.clone(), 0);
        let out = train(model, train_set, &[], &config).map_err(|e| e.to_string())?;
        let report = evaluate_ranking(
            &out.model,
            test_set,
            SimilarityScorer::Precomputed,
            DecodeOptions::greedy(),
        )
        .map_err(|e| e.to_string())?;
        top1.push(report.top1_match);
    }
    check(
        top1[1] >= top1[0],
        format!("rank-1 accuracy fell from {:.3} to {:.3}", top1[0], top1[1]),
    )?;

    // Share of the rank-1 step in the total loss and in the gradient.
    let model = PointerModel::new(dims, vocab, 3);
    let record = &corpus[0];
    let mut shares = Vec::new();
    for alpha1 in [1.0, 3.0] {
        let weights = RankWeights::new(vec![alpha1, 1.0, 1.0]).map_err(|e| e.to_string())?;
        let target = target_for(&model, record, SimilarityScorer::Precomputed, &weights)
            .map_err(|e| e.to_string())?;
        let share = rank1_share(&target);
        let logits = model.forward(record, &target).map_err(|e| e.to_string())?;
        let report = sequence_loss(&logits, &target).map_err(|e| e.to_string())?;
        let (t, step) = target
            .pointer_steps()
            .find(|(_, s)| s.rank == Some(1))
            .unwrap();
        let p = masked_softmax(logits.row(t), &step.mask).map_err(|e| e.to_string())?;
        for (j, &g) in report.grad.row(t).iter().enumerate() {
            let onehot = if j == step.target { 1.0 } else { 0.0 };
            let want = share * (p[j] - onehot);
            check(
                (g - want).abs() < 1e-15,
                format!("gradient column {j}: {g} vs {want}"),
            )?;
        }
        shares.push(share);
    }
    check(
        shares == [1.0 / 5.0, 3.0 / 7.0],
        format!("rank-1 shares {shares:?}, expected [1/5, 3/7]"),
    )?;
    Ok(format!(
        "rank-1 accuracy {:.3} -> {:.3}; rank-1 share 1/5 -> 3/7",
        top1[0], top1[1]
    ))
}

fn metric_golden() -> Outcome {
    let v = ndcg(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    check((v - 0.79000).abs() < 1e-4, format!("nDCG {v}"))?;
    let r = rouge_l("the cat", "the cat sat");
    check(r == 0.8, format!("ROUGE-L {r}"))?;
    let m = meteor_exact("cat", "cat");
    check(m == 0.5, format!("METEOR {m}"))?;
    let t = kendall_tau(&[2, 1, 3], &[1, 2, 3]).map_err(|e| e.to_string())?;
    check(t == 1.0 / 3.0, format!("tau {t}"))?;
    Ok(format!("nDCG {v:.5}, ROUGE-L {r}, METEOR {m}, tau {t:.6}"))
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(),
            "--out".into(),
            p("q.jsonl"),
            "--queries".into(),
            "60".into(),
            "--seed".into(),
            "9".into(),
        ],
        vec![
            "train".into(),
            "--queries".into(),
            p("q.jsonl"),
            "--out".into(),
            p("m.ckpt"),
            "--epochs".into(),
            "5".into(),
            "--dim".into(),
            "8".into(),
        ],
        vec![
            "rerank".into(),
            "--checkpoint".into(),
            p("m.ckpt"),
            "--queries".into(),
            p("q.jsonl"),
            "--out".into(),
            p("run.txt"),
            "--beam".into(),
            "3".into(),
        ],
        vec![
            "eval".into(),
            "--queries".into(),
            p("q.jsonl"),
            "--run".into(),
            p("run.txt"),
        ],
    ];
    let mut eval_out = String::new();
    for args in steps {
        let argv = std::iter::once("ptrrank".to_string()).chain(args.iter().cloned());
        let (code, out, err) = run_captured(argv);
        check(code == 0, format!("{} exited {code}: {err}", args[0]))?;
        if args[0] == "eval" {
            eval_out = out;
        }
    }
    let mut files = Vec::new();
    for name in ["q.jsonl", "m.ckpt", "m.ckpt.vocab", "m.ckpt.log", "run.txt"] {
        files.push((
            name.to_string(),
            std::fs::read(dir.join(name)).map_err(|e| e.to_string())?,
        ));
    }
    files.push(("eval stdout".into(), eval_out.into_bytes()));
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        check(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        first.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 gradient audit", gradient_audit),
        ("2 masking correctness", masking),
        ("3 brute-force oracle", brute_force),
        ("4 loss reductions", reductions),
        ("5 convergence", convergence),
        ("6 rank-weight effect", rank_weight_effect),
        ("7 metric golden values", metric_golden),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome =
            catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
