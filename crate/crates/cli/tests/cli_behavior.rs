//! CLI contract tests: exit codes, error messages, config rejection, and
//! the reduced-budget end-to-end comparison run.

use std::path::Path;
use std::process::{Command, Output};

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emdiff"))
        .args(args)
        .output()
        .expect("spawn emdiff")
}

fn write_tiny_config(dir: &Path) -> String {
    let cfg = r#"{
      "schedule": {"t_max": 30, "beta_min": 0.005, "beta_max": 0.25},
      "network": {"image_size": 32, "in_channels": 2, "base_channels": 4, "depth": 2, "time_embed_dim": 8},
      "guidance": {"lambda_h": 0.0, "lambda_f": 0.05},
      "training": {"batch_size": 4, "learning_rate": 0.001, "max_steps": 25, "seed": 3},
      "sampling": {"seed": 9},
      "data": {"seed": 5, "params": {"n_subjects": 5, "samples_per_subject": 6},
               "extra_seed": 6,
               "extra": {"n_subjects": 3, "samples_per_subject": 4, "vis_only": true, "subject_offset": 1000}},
      "eval": {"classifier_iterations": 100}
    }"#;
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_documents_config_keys_and_defaults() {
    let out = run_cli(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["gen-data", "train-score", "translate", "ablate"] {
        assert!(text.contains(needle), "--help missing {needle}");
    }
    // the long help carries the full config reference with defaults
    let long = run_cli(&["help"]);
    let long_text = String::from_utf8_lossy(&long.stdout);
    for needle in ["lambda_h", "beta_min", "batch_size", "classifier_iterations"] {
        assert!(
            long_text.contains(needle),
            "config reference missing {needle}"
        );
    }
}

#[test]
fn missing_checkpoint_exits_one_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let gen = run_cli(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert!(gen.status.success());

    let out = run_cli(&[
        "translate",
        "--config",
        &cfg,
        "--data",
        dir.path().join("d/main/manifest.json").to_str().unwrap(),
        "--ckpt",
        dir.path().join("nowhere/score.nfsd").to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("score.nfsd"), "stderr: {err}");
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"training": {"learninrate": 0.1}}"#).unwrap();
    let out = run_cli(&[
        "gen-data",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown field"), "stderr: {err}");
}

#[test]
fn missing_data_manifest_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = run_cli(&[
        "train-score",
        "--config",
        &cfg,
        "--data",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn end_to_end_workflow_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data_dir = dir.path().join("d");
    let gen = run_cli(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(gen.status.success());
    let summary: serde_json::Value =
        serde_json::from_slice(&gen.stdout).expect("one-line JSON summary");
    assert_eq!(summary["command"], "gen-data");
    assert_eq!(summary["main_samples"], 30);

    let manifest = data_dir.join("main/manifest.json");
    let train_dir = dir.path().join("train");
    let ts = run_cli(&[
        "train-score",
        "--config",
        &cfg,
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(ts.status.success(), "{ts:?}");
    assert!(train_dir.join("score.nfsd").is_file());
    assert!(train_dir.join("score_trainlog.csv").is_file());

    let trans_dir = dir.path().join("trans");
    let tr = run_cli(&[
        "translate",
        "--config",
        &cfg,
        "--data",
        manifest.to_str().unwrap(),
        "--ckpt",
        train_dir.join("score.nfsd").to_str().unwrap(),
        "--out",
        trans_dir.to_str().unwrap(),
    ]);
    assert!(tr.status.success(), "{tr:?}");
    assert!(trans_dir.join("manifest.json").is_file());

    let q_dir = dir.path().join("q");
    let q = run_cli(&[
        "eval-quality",
        "--translated",
        trans_dir.join("manifest.json").to_str().unwrap(),
        "--out",
        q_dir.to_str().unwrap(),
    ]);
    assert!(q.status.success(), "{q:?}");
    let qs: serde_json::Value = serde_json::from_slice(&q.stdout).unwrap();
    assert!(qs["psnr_mean"].as_f64().unwrap() > 0.0);

    // extras -> eval-fer
    let extra_manifest = data_dir.join("extra/manifest.json");
    let extra_trans = dir.path().join("extra_trans");
    let tr2 = run_cli(&[
        "translate",
        "--config",
        &cfg,
        "--data",
        extra_manifest.to_str().unwrap(),
        "--ckpt",
        train_dir.join("score.nfsd").to_str().unwrap(),
        "--split",
        "all",
        "--out",
        extra_trans.to_str().unwrap(),
    ]);
    assert!(tr2.status.success(), "{tr2:?}");

    let fer_dir = dir.path().join("fer");
    let fer = run_cli(&[
        "eval-fer",
        "--config",
        &cfg,
        "--data",
        manifest.to_str().unwrap(),
        "--extra",
        extra_trans.join("manifest.json").to_str().unwrap(),
        "--out",
        fer_dir.to_str().unwrap(),
    ]);
    assert!(fer.status.success(), "{fer:?}");
    assert!(fer_dir.join("fer.csv").is_file());
    assert!(fer_dir.join("fer.json").is_file());
}

#[test]
fn ablate_tiny_emits_five_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ab");
    let out = run_cli(&["ablate", "--tiny", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(lines.len(), 6, "header + 5 rows: {csv}");
    assert_eq!(lines[0], "condition,psnr_mean,ssim_mean");
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        vec!["Baseline", "Cond", "Cond+E_h", "Cond+E_f", "Cond+E_h+E_f"]
    );
}
