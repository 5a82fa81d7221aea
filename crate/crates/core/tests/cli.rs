use std::path::Path;
use std::process::{Command, Output};

use wabert::cif::CifConfig;
use wabert::cli::{compare_table, parse_compare_csv, RunConfig, RunResult, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use wabert::losses::{parse_loss_log, AlignMode};
use wabert::models::GraftedModel;

const SMALL: [&str; 14] = [
    "--set", "count=24",
    "--set", "epochs=1",
    "--set", "batch_size=4",
    "--set", "warmup_steps=1",
    "--set", "encoder_hidden=16",
    "--set", "ft_epochs=10",
    "--set", "eval_split=dev",
];

fn wabert(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wabert"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn metrics(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_writes_only_inside_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for sub in ["gen-data", "train-align", "finetune", "eval", "heatmap", "pca"] {
        let mut args = vec![sub];
        args.extend(SMALL);
        let o = wabert(&out, &args);
        assert_eq!(code(&o), EXIT_OK, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
    for f in [
        "corpus",
        "checkpoint.wabt",
        "loss_log.csv",
        "config.toml",
        "classifier.wabt",
        "finetune_log.csv",
        "metrics.json",
        "heatmap.csv",
        "heatmap.pgm",
        "pca.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = parse_loss_log(&std::fs::read_to_string(out.join("loss_log.csv")).unwrap()).unwrap();
    assert!(!log.is_empty());
    let m = metrics(&out);
    assert!(m["f1_weighted"].is_number());
    assert!(m["mae_ms"].as_f64().unwrap() >= 0.0);
    let saved: RunConfig = toml::from_str(&std::fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.count, 24);
}

#[test]
fn flags_override_set_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train-align", "--align-mode", "cos", "--graft-depth", "6", "--tau", "0.3", "--set", "align_mode=infonce"];
    args.extend(SMALL);
    assert_eq!(code(&wabert(dir.path(), &args)), EXIT_OK);
    let saved: RunConfig = toml::from_str(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!((saved.align_mode.as_str(), saved.graft_depth, saved.tau), ("cos", 6, 0.3));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&wabert(out, &["eval", "--set", "bogus=1"])), EXIT_CONFIG);
    assert_eq!(code(&wabert(out, &["eval", "--set", "tau=0"])), EXIT_CONFIG);
    assert_eq!(code(&wabert(out, &["eval", "--graft-depth", "2"])), EXIT_CONFIG);
    assert_eq!(code(&wabert(out, &["frobnicate"])), EXIT_CONFIG);
    let missing = wabert(out, &["eval", "--set", "count=10"]);
    assert_eq!(code(&missing), EXIT_RUNTIME);
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error["));
    assert_eq!(code(&wabert(out, &["--help"])), EXIT_OK);
    let help = String::from_utf8_lossy(&wabert(out, &["--help"]).stdout).to_string();
    assert!(help.contains("graft_depth = 3") && help.contains("WABERT_THREADS"));
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "count = 7\nseed = 3\n").unwrap();
    let out = dir.path().join("o");
    let o = wabert(&out, &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK);
    let n = std::fs::read_to_string(out.join("corpus/manifest.jsonl")).unwrap().lines().count();
    assert_eq!(n, 7);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = wabert(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 7);
}

#[test]
fn perfect_oracle_scores_zero_error() {
    // one encoder frame per token and a constant predictor: scaled
    // weights are exactly one per frame, so every boundary is exact
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = RunConfig::resolve(
        None,
        &[
            "frames_per_token_min=4".into(),
            "frames_per_token_max=4".into(),
            "noise_sigma=0.0".into(),
            "count=20".into(),
            "encoder_hidden=16".into(),
        ],
        &[],
    )
    .unwrap();
    let mut model = GraftedModel::new(cfg.model(), CifConfig::default()).unwrap();
    let w = model.predictor.proj.weight;
    model.trainable.get_mut(w).data_mut().fill(0.0);
    model.save(&out.join("checkpoint.wabt")).unwrap();
    let o = wabert(
        out,
        &[
            "eval",
            "--set", "frames_per_token_min=4",
            "--set", "frames_per_token_max=4",
            "--set", "noise_sigma=0.0",
            "--set", "count=20",
            "--set", "encoder_hidden=16",
        ],
    );
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let m = metrics(out);
    assert!(m["mae_ms"].as_f64().unwrap().abs() < 1e-9, "{m}");
    assert_eq!(m["acc_50"].as_f64(), Some(1.0));
}

#[test]
fn comparison_table_round_trips() {
    let results = vec![
        RunResult {
            depth: 12,
            align_mode: AlignMode::Cosine,
            report: None,
        },
        RunResult {
            depth: 3,
            align_mode: AlignMode::InfoNce,
            report: None,
        },
    ];
    let (text, csv) = compare_table(&results);
    assert!(text.lines().nth(1).unwrap().trim_start().starts_with('3'));
    let parsed = parse_compare_csv(&csv).unwrap();
    assert_eq!(parsed[1].0, 12);
    assert!(parse_compare_csv("nonsense\n").is_err());
}

#[test]
fn ablate_fills_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate"];
    args.extend(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_wabert"))
        .args(&args)
        .arg("--out")
        .arg(dir.path())
        .env("WABERT_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = parse_compare_csv(&std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap()).unwrap();
    assert_eq!(parsed.len(), 8);
    assert!(parsed.iter().all(|r| r.2[0].is_some()));
    for d in [3, 6, 9, 12] {
        for m in ["cos", "infonce"] {
            assert!(dir.path().join(format!("ablate/depth{d}_{m}/metrics.json")).exists());
        }
    }
}
