//! End-to-end checks of the command-line binary: artifact layout, exit
//! codes, determinism of emitted files, and report rendering.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fmm_tc::config::{write_canonical_json, RunConfig};
use fmm_tc::data::{block_covariance, CohortCell};
use fmm_tc::model::AttentionKind;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmm-tc"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_status(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A configuration small enough that every subcommand finishes in seconds.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.profile.n_rois = 8;
    cfg.profile.sigma0 = block_covariance(8, 2, 0.6);
    cfg.profile.sigma1 = block_covariance(8, 4, 0.6);
    cfg.profile.n_timepoints = 40;
    cfg.profile.cov_strength_jitter = 0.0;
    cfg.profile.ar_jitter = 0.0;
    cfg.profile.cohort = vec![
        CohortCell { label: 1, drug: "duloxetine".into(), count: 4 },
        CohortCell { label: 0, drug: "duloxetine".into(), count: 4 },
        CohortCell { label: 1, drug: "placebo".into(), count: 4 },
        CohortCell { label: 0, drug: "placebo".into(), count: 4 },
    ];
    cfg.ts.model_dim = 16;
    cfg.ts.layers = 1;
    cfg.ts.heads = 2;
    cfg.ts.ff_mult = 2;
    cfg.ts.patch_len = 10;
    cfg.ts.max_rois = 8;
    cfg.ts.max_patches = 4;
    cfg.ts.attention = AttentionKind::Exact;
    cfg.fc.widths = [4, 4, 4, 4];
    cfg.fc.output_dim = 16;
    cfg.experiment.folds = 2;
    cfg.experiment.train.epochs = 2;
    cfg.experiment.train.batch_size = 4;
    cfg.experiment.train.patience = 2;
    cfg.pretrain.epochs = 2;
    cfg.pretrain_subjects = 4;
    cfg.seed = 7;
    cfg
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.json");
    write_canonical_json(&path, &tiny_config()).unwrap();
    path
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_status(&run_in(dir.path(), &["frobnicate"]), 2);
    assert_status(&run_in(dir.path(), &["cv", "--no-such-flag"]), 2);
    assert_status(&run_in(dir.path(), &["cv", "--modality", "voxels"]), 2);
    // config invariant violations are usage errors too
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"experiment": {"folds": 1}}"#).unwrap();
    let out = run_in(dir.path(), &["cv", "--config", "bad.json"]);
    assert_status(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));
}

#[test]
fn gen_data_is_deterministic_and_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.file_name().unwrap().to_str().unwrap();
    let a = run_in(dir.path(), &["gen-data", "--config", cfg, "--out", "a"]);
    assert_status(&a, 0);
    let b = run_in(dir.path(), &["gen-data", "--config", cfg, "--out", "b"]);
    assert_status(&b, 0);
    // stdout names the output directory, so compare only the fingerprint line
    let fingerprint = |out: &Output| -> String {
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .find(|l| l.contains("fingerprint"))
            .expect("fingerprint line")
            .to_string()
    };
    assert_eq!(fingerprint(&a), fingerprint(&b), "runs print different fingerprints");
    assert!(dir.path().join("a/resolved_config.json").exists());
    assert!(dir.path().join("a/manifest.json").exists());
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "resolved_config.json" {
            // records the --out override, so it differs between a and b
            continue;
        }
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap(),
            "{name:?} differs between identical runs"
        );
    }
}

#[test]
fn cv_writes_report_and_fold_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(dir.path(), &["cv", "--config", "run.json"]);
    assert_status(&out, 0);
    assert!(dir.path().join("reports/cv_report.json").exists());
    assert!(dir.path().join("reports/resolved_config.json").exists());
    assert!(dir.path().join("checkpoints/fold_0.fmtc").exists());
    assert!(dir.path().join("checkpoints/fold_1.fmtc").exists());
    // report renders the persisted run
    let md = run_in(dir.path(), &["report", "--config", "run.json", "--format", "md"]);
    assert_status(&md, 0);
    let text = String::from_utf8_lossy(&md.stdout);
    assert!(text.contains("| mean |"), "{text}");
    assert!(dir.path().join("reports/cv_summary.md").exists());
    let csv = run_in(dir.path(), &["report", "--config", "run.json", "--format", "csv"]);
    assert_status(&csv, 0);
    let text = fs::read_to_string(dir.path().join("reports/cv_summary.csv")).unwrap();
    assert!(text.starts_with("cell,accuracy,f1,bacc,auroc,mcc"), "{text}");
}

#[test]
fn report_without_prior_run_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(dir.path(), &["report", "--config", "run.json", "--grid", "ablation"]);
    assert_status(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cv --grid"));
}

#[test]
fn pretrain_then_cv_reuses_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(dir.path(), &["pretrain", "--config", "run.json"]);
    assert_status(&out, 0);
    let ckpt = dir.path().join("checkpoints/pretrained.fmtc");
    assert!(ckpt.exists());
    assert!(dir.path().join("reports/pretrain_history.csv").exists());
    let before = fs::read(&ckpt).unwrap();
    let out = run_in(dir.path(), &["cv", "--config", "run.json", "--pretrained"]);
    assert_status(&out, 0);
    assert_eq!(before, fs::read(&ckpt).unwrap(), "cv must not rewrite the checkpoint");
}

#[test]
fn train_drug_probe_interpret_produce_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    let out = run_in(dir.path(), &["train", "--config", "run.json"]);
    assert_status(&out, 0);
    assert!(dir.path().join("checkpoints/model.fmtc").exists());
    assert!(dir.path().join("reports/train_history.csv").exists());
    assert!(dir.path().join("reports/train_report.json").exists());

    let out = run_in(
        dir.path(),
        &["drug", "--config", "run.json", "--train-drug", "placebo", "--test-drug", "duloxetine"],
    );
    assert_status(&out, 0);
    let report = fs::read_to_string(dir.path().join("reports/drug_report.json")).unwrap();
    assert!(report.contains("\"runs\""), "{report}");

    let out = run_in(dir.path(), &["probe", "--config", "run.json"]);
    assert_status(&out, 0);
    assert!(dir.path().join("reports/probe_report.json").exists());

    let out = run_in(
        dir.path(),
        &[
            "interpret",
            "--config",
            "run.json",
            "--checkpoint",
            "checkpoints/model.fmtc",
            "--steps",
            "8",
        ],
    );
    assert_status(&out, 0);
    assert!(dir.path().join("reports/attribution.json").exists());
    assert!(dir.path().join("reports/attribution_profile.csv").exists());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("modality importance"), "{text}");
}

#[test]
fn grid_report_renders_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path());
    // hand-written grid report: rendering must not depend on a prior slow run
    fs::create_dir_all(dir.path().join("reports")).unwrap();
    let cells = ["ts_only", "fc_only", "both_scratch", "both_pretrained"];
    let body: Vec<serde_json::Value> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            serde_json::json!({
                "cell": c,
                "mean": {"accuracy": 50.0 + i as f64, "macro_f1": 48.0, "bacc": 51.0,
                          "auroc": 55.0, "mcc": 2.0 * i as f64},
                "std": {"accuracy": 1.0, "macro_f1": 1.0, "bacc": 1.0,
                         "auroc": 1.0, "mcc": 1.0},
            })
        })
        .collect();
    fs::write(
        dir.path().join("reports/ablation_report.json"),
        serde_json::json!({"cells": body, "pretrain_final_loss": 0.9}).to_string(),
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["report", "--config", "run.json", "--grid", "ablation", "--format", "csv"],
    );
    assert_status(&out, 0);
    let text = fs::read_to_string(dir.path().join("reports/ablation_summary.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5, "{text}");
    for (line, cell) in lines[1..].iter().zip(cells) {
        assert!(line.starts_with(cell), "{line}");
    }
}
