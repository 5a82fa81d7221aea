//! Acceptance suite: one line per criterion.
//!
//! A criterion that is measured and missed prints FAIL; the process only
//! exits non-zero when a criterion cannot be evaluated at all (error or
//! panic), so that a missed target is reported rather than hidden.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wabert::cif::{integrate_and_fire, AlignmentWeights, CifConfig, FrameSequence};
use wabert::cli::gradient_suite;
use wabert::diffcore::Tensor;
use wabert::evalmetrics::MetricsReport;
use wabert::losses::{value, AlignMode};
use wabert::models::{graft_forward, linguistic_targets, top5_candidates, argmax, GraftedModel, ModelConfig};
use wabert::synthdata::{generate_utterances, split_corpus, SynthConfig, Utterance};
use wabert::train::{evaluate_checkpoint, finetune_downstream, train_align, FinetuneConfig, TrainConfig};
use wabert::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

/// Textbook integrate-and-fire on an explicit accumulator and state vector.
fn cif_oracle(alpha: &[f64], frames: &[Vec<f64>], cfg: &CifConfig) -> Vec<Vec<f64>> {
    let d = frames.first().map_or(0, Vec::len);
    let (beta, eps) = (cfg.beta, cfg.epsilon_residual);
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut state = vec![0.0; d];
    let add = |state: &mut Vec<f64>, w: f64, h: &[f64]| {
        for (s, x) in state.iter_mut().zip(h) {
            *s += w * x;
        }
    };
    for (&a, h) in alpha.iter().zip(frames) {
        if acc + a < beta {
            acc += a;
            add(&mut state, a, h);
            if acc >= beta - eps {
                out.push(std::mem::replace(&mut state, vec![0.0; d]));
                acc = 0.0;
            }
            continue;
        }
        let take = beta - acc;
        add(&mut state, take, h);
        out.push(std::mem::replace(&mut state, vec![0.0; d]));
        let mut rest = a - take;
        while rest >= beta {
            out.push(h.iter().map(|x| beta * x).collect());
            rest -= beta;
        }
        acc = rest;
        add(&mut state, rest, h);
        if rest > 0.0 && acc >= beta - eps {
            out.push(std::mem::replace(&mut state, vec![0.0; d]));
            acc = 0.0;
        }
    }
    if acc > 0.0 && acc >= beta / 2.0 {
        out.push(state);
    }
    out
}

fn criterion_1() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = CifConfig::default();
    let mut worst: f64 = 0.0;
    let mut disagreements = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=50);
        let d = rng.random_range(1..=6);
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.6)).collect();
        let frames: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let expected = cif_oracle(&alpha, &frames, &cfg);
        let fs = FrameSequence::new(Tensor::from_rows(&frames)?, 20.0, "oracle")?;
        match integrate_and_fire(&fs, &AlignmentWeights::unscaled(alpha), &cfg) {
            Ok(got) => {
                if got.fired_count != expected.len() {
                    disagreements += 1;
                    continue;
                }
                for (row, want) in got.aligned.rows().zip(&expected) {
                    for (a, b) in row.iter().zip(want) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            Err(_) => disagreements += usize::from(!expected.is_empty()),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        disagreements == 0 && worst <= 1e-9 && secs < 10.0,
        format!("1000 instances, max |diff| {worst:.2e}, {disagreements} count mismatches, {secs:.2} s"),
    )
}

fn criterion_2() -> Result<Outcome> {
    let fs = FrameSequence::new(Tensor::identity(3), 20.0, "trace")?;
    let got = integrate_and_fire(&fs, &AlignmentWeights::unscaled(vec![0.5, 0.7, 0.8]), &CifConfig::default())?;
    let want = [[0.5, 0.5, 0.0], [0.0, 0.2, 0.8]];
    let err = got
        .aligned
        .rows()
        .zip(&want)
        .flat_map(|(r, w)| r.iter().zip(w).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    let n_err = (got.n_predicted - 2.0).abs();
    outcome(
        got.fired_count == 2 && err <= 1e-12 && n_err <= 1e-12,
        format!("fired {}, max |diff| {err:.1e}, n_predicted {}", got.fired_count, got.n_predicted),
    )
}

fn criterion_3() -> Result<Outcome> {
    let t = Instant::now();
    let suite = gradient_suite(0)?;
    let secs = t.elapsed().as_secs_f64();
    let (name, worst) = suite
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_abs_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let excluded: usize = suite.iter().map(|(_, r)| r.excluded).sum();
    outcome(
        worst < 1e-4 && secs < 60.0 && suite.iter().all(|(_, r)| r.checked > 0),
        format!("{} checks, worst {worst:.2e} ({name}), {excluded} boundary coordinates excluded, {secs:.2} s", suite.len()),
    )
}

fn criterion_4() -> Result<Outcome> {
    let e = Tensor::identity(2);
    let nce = value::info_nce(&e, &e, 1.0)?;
    let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    let vocab = 50;
    let sub = value::subword_loss_from_logits(&Tensor::matrix(3, vocab, vec![0.7; 3 * vocab])?, &[1, 7, 49])?;
    let (e1, e2) = ((nce - want).abs(), (sub - (vocab as f64).ln()).abs());
    outcome(e1 <= 1e-9 && e2 <= 1e-9, format!("info_nce off by {e1:.1e}, subword off by {e2:.1e}"))
}

fn identity_model() -> Result<GraftedModel> {
    GraftedModel::new(ModelConfig::default(), CifConfig::default())
}

fn criterion_8() -> Result<Outcome> {
    let base = identity_model()?;
    let corpus = generate_utterances(&SynthConfig::default(), 5)?;
    let mut mismatches = 0;
    for depth in [3, 6, 9, 12] {
        let mut m = base.clone();
        m.config.graft_depth = depth;
        for u in &corpus {
            let l = linguistic_targets(&u.token_ids, depth, &m.linguistic)?;
            let (top, _) = graft_forward(&l.states, &m)?;
            let reference = m.linguistic.layer_output(&u.token_ids, m.linguistic.depth())?;
            let same = top.data().len() == reference.data().len()
                && top.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += usize::from(!same);
        }
    }
    outcome(mismatches == 0, format!("depths 3/6/9/12 x 5 utterances, {mismatches} non-identical outputs"))
}

/// Alignment training configuration shared by the directional runs.
fn desk_train(mode: AlignMode, subword: f64) -> TrainConfig {
    let mut tc = TrainConfig {
        base_lr: 5e-3,
        batch_size: 4,
        warmup_steps: 200,
        epochs: 26,
        ..Default::default()
    };
    tc.loss.align_mode = mode;
    tc.loss.weights.subword = subword;
    tc
}

struct DirectionalRuns {
    infonce: MetricsReport,
    cos: MetricsReport,
    frozen_ok: bool,
    secs: f64,
}

fn directional_runs() -> Result<DirectionalRuns> {
    let t = Instant::now();
    let corpus = generate_utterances(&SynthConfig::default(), 500)?;
    let (train, dev, _) = split_corpus(&corpus, [0.8, 0.1, 0.1], 0)?;
    let mut frozen_ok = true;
    let mut run = |mode| -> Result<MetricsReport> {
        let mut m = identity_model()?;
        let before = m.linguistic.checksum();
        train_align(&train, &mut m, &desk_train(mode, 0.0))?;
        frozen_ok &= m.linguistic.checksum() == before;
        evaluate_checkpoint(&dev, &m)
    };
    let infonce = run(AlignMode::InfoNce)?;
    let cos = run(AlignMode::Cosine)?;
    Ok(DirectionalRuns {
        infonce,
        cos,
        frozen_ok,
        secs: t.elapsed().as_secs_f64(),
    })
}

fn criterion_5(r: &DirectionalRuns) -> Result<Outcome> {
    let (a, b) = (&r.infonce, &r.cos);
    let lower = a.mae_ms < b.mae_ms && a.median_ms < b.median_ms;
    let ratio = a.mae_ms / b.mae_ms;
    outcome(
        lower && ratio <= 0.5 && r.secs < 600.0,
        format!(
            "InfoNCE MAE {:.2} / median {:.2} ms vs cos {:.2} / {:.2} ms; strictly lower: {lower}; ratio {ratio:.3} (need <= 0.5); {:.0} s",
            a.mae_ms, a.median_ms, b.mae_ms, b.median_ms, r.secs
        ),
    )
}

fn criterion_6(r: &DirectionalRuns) -> Result<Outcome> {
    let (a, b) = (r.infonce.tolerance(), r.cos.tolerance());
    let dominates = a.accuracy.iter().zip(&b.accuracy).all(|(x, y)| x >= y);
    outcome(
        dominates && a.is_monotone() && b.is_monotone(),
        format!("InfoNCE {:?} vs cos {:?} at {:?} ms", a.accuracy, b.accuracy, a.cutoffs_ms),
    )
}

fn criterion_7(r: &DirectionalRuns) -> Result<Outcome> {
    let (a, b) = (r.infonce.diagonality, r.cos.diagonality);
    outcome(a >= 0.3 && a > b, format!("InfoNCE {a:.3} vs cos {b:.3} on dev"))
}

fn criterion_9(r: &DirectionalRuns) -> Result<Outcome> {
    outcome(r.frozen_ok, "linguistic checksum compared across both 26-epoch trainings")
}

fn criterion_10() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = SynthConfig::default();
    let all = generate_utterances(&cfg, 3000)?;
    let (align_pool, ft_pool) = all.split_at(2000);
    let (train, _, test) = split_corpus(align_pool, [0.8, 0.1, 0.1], 0)?;
    let narrow = ModelConfig {
        encoder_hidden: 64,
        ..Default::default()
    };
    let mut m = GraftedModel::new(narrow, CifConfig::default())?;
    let lm = m.linguistic.checksum();
    train_align(&train, &mut m, &desk_train(AlignMode::InfoNce, 1.0))?;
    let finetune = |permute_labels| -> Result<MetricsReport> {
        let mut mm = m.clone();
        let fc = FinetuneConfig {
            unfreeze_acoustic: true,
            joint_epochs: 30,
            joint_lr: 3e-3,
            permute_labels,
            ..Default::default()
        };
        finetune_downstream(ft_pool, &mut mm, &fc)?;
        if mm.linguistic.checksum() != lm {
            return Err(wabert::Error::Config("language model changed during fine-tuning".into()));
        }
        evaluate_checkpoint(&test, &mm)
    };
    let real = finetune(false)?;
    let control = finetune(true)?;
    let (rec, f1) = (real.recall_weighted.unwrap_or(0.0), real.f1_weighted.unwrap_or(0.0));
    let (crec, cf1) = (control.recall_weighted.unwrap_or(1.0), control.f1_weighted.unwrap_or(1.0));
    outcome(
        rec >= 0.9 && f1 >= 0.9 && crec <= 0.45 && cf1 <= 0.45,
        format!(
            "recall {rec:.3}, F1 {f1:.3}; permuted-label control recall {crec:.3}, F1 {cf1:.3}; {} test utterances, {:.0} s",
            test.len(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_11() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut contained = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let mut logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        if n > 2 && rng.random_bool(0.3) {
            logits[n - 1] = logits[0];
        }
        contained &= top5_candidates(&logits).contains(&argmax(&logits));
    }
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let corpus: Vec<Utterance> = generate_utterances(&cfg, 2000)?;
    let (train, dev, _) = split_corpus(&corpus, [0.8, 0.1, 0.1], 0)?;
    let mut m = identity_model()?;
    train_align(&train, &mut m, &desk_train(AlignMode::InfoNce, 1.0))?;
    let r = evaluate_checkpoint(&dev, &m)?;
    outcome(
        contained && r.top5 >= r.top1 && r.top1 >= 0.95,
        format!(
            "top-5 contains top-1 on 1000 random rows: {contained}; noiseless dev top-1 {:.3}, top-5 {:.3}; {:.0} s",
            r.top1,
            r.top5,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn run_pipeline(out: &Path) -> i32 {
    let mut args: Vec<String> = vec!["wabert".into(), "--out".into(), out.display().to_string(), "--seed".into(), "4".into()];
    for kv in [
        "count=40",
        "epochs=2",
        "batch_size=4",
        "warmup_steps=3",
        "encoder_hidden=16",
        "ft_epochs=30",
        "ft_unfreeze=true",
        "ft_joint_epochs=1",
        "cross_utterance_negatives=true",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    for sub in ["train-align", "finetune", "eval"] {
        let mut a = args.clone();
        a.insert(1, sub.into());
        let code = wabert::cli::run(a);
        if code != 0 {
            return code;
        }
    }
    0
}

fn criterion_12() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| wabert::Error::Config(e.to_string()))?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if run_pipeline(&a) != 0 || run_pipeline(&b) != 0 {
        return outcome(false, "pipeline run failed");
    }
    let files = ["loss_log.csv", "checkpoint.wabt", "finetune_log.csv", "classifier.wabt", "metrics.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() || !a.join(f).exists())
        .collect();
    outcome(differing.is_empty(), format!("two seeded train/finetune/eval runs; differing files: {differing:?}"))
}

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Error,
    Skip,
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Result<Outcome>) -> Status {
    let t = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(Ok(o)) => {
            println!("criterion {id:>2} {}: {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            if o.pass {
                Status::Pass
            } else {
                Status::Fail
            }
        }
        Ok(Err(e)) => {
            println!("criterion {id:>2} ERROR: {name}: {e}");
            Status::Error
        }
        Err(_) => {
            println!("criterion {id:>2} ERROR: {name}: panicked");
            Status::Error
        }
    }
}

fn main() {
    let quick = std::env::args().any(|a| a == "--quick");
    let mut results = vec![
        report(1, "CIF matches the plain recurrence oracle", criterion_1),
        report(2, "CIF hand trace", criterion_2),
        report(3, "gradient suite", criterion_3),
        report(4, "closed-form losses", criterion_4),
    ];
    let runs = if quick {
        None
    } else {
        match catch_unwind(directional_runs) {
            Ok(Ok(r)) => Some(r),
            Ok(Err(e)) => {
                println!("directional runs failed: {e}");
                None
            }
            Err(_) => None,
        }
    };
    let directional: [(usize, &str, fn(&DirectionalRuns) -> Result<Outcome>); 3] = [
        (5, "boundary error, InfoNCE vs cosine", criterion_5),
        (6, "tolerance accuracy, InfoNCE vs cosine", criterion_6),
        (7, "similarity diagonality", criterion_7),
    ];
    for (id, name, f) in directional {
        results.push(match &runs {
            Some(r) => report(id, name, || f(r)),
            None if quick => skip(id, name),
            None => report(id, name, || Err(wabert::Error::Config("directional runs unavailable".into()))),
        });
    }
    results.push(report(8, "identity grafting is bit-exact", criterion_8));
    results.push(match &runs {
        Some(r) => report(9, "language model stays frozen", || criterion_9(r)),
        None if quick => skip(9, "language model stays frozen"),
        None => report(9, "language model stays frozen", || Err(wabert::Error::Config("directional runs unavailable".into()))),
    });
    results.push(if quick { skip(10, "downstream classification") } else { report(10, "downstream classification", criterion_10) });
    results.push(if quick { skip(11, "subword candidates") } else { report(11, "subword candidates", criterion_11) });
    results.push(report(12, "determinism", criterion_12));

    let count = |s| results.iter().filter(|&&r| r == s).count();
    let errored = count(Status::Error);
    println!(
        "acceptance: {} passed, {} failed, {errored} errored, {} skipped",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Skip)
    );
    if errored > 0 {
        std::process::exit(1);
    }
}

fn skip(id: usize, name: &str) -> Status {
    println!("criterion {id:>2} SKIP: {name} (--quick)");
    Status::Skip
}
