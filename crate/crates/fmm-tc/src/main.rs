//! Command-line front end: data generation, pretraining, training,
//! cross-validation, drug protocols, probes, attribution, and report
//! rendering. Exit status 0 on success, 1 on a domain error, 2 on a
//! usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fmm_tc::config::{load_config, write_canonical_json, Protocol, RunConfig};
use fmm_tc::data::{
    generate_pretrain_corpus, generate_synthetic_cohort, load_cohort, save_cohort, Cohort,
    GeneratorProfile,
};
use fmm_tc::harness::{
    drug_cross, drug_within, fused_features, knn_probe, linear_probe, pca_features, predict,
    prepare_cohort, raw_fc_features, run_ablation, run_cv, AblationSpec, CvOutcome, Metrics,
    PreparedSubject,
};
use fmm_tc::interpret::{
    attribute_subject, modality_importance, write_attributions_json, write_profile_csv,
};
use fmm_tc::model::{load_checkpoint, save_checkpoint, FmmModel, FusionKind, Modality};
use fmm_tc::pretrain::{mae_pretrain, prepare_tokens, write_history_csv};
use fmm_tc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fmm-tc",
    version,
    about = "Multimodal drug-response prediction on synthetic fMRI cohorts"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileName {
    OpenneuroLike,
    Fidelity,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Run configuration file (JSON); missing keys take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override for reports and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Modality override: ts | fc | both.
    #[arg(long)]
    modality: Option<String>,
    /// Use (and if necessary run) masked-autoencoder pretraining; the
    /// time-series encoder is then frozen during fine-tuning.
    #[arg(long)]
    pretrained: bool,
    /// Fusion override: concat | sum | cross_uni | cross_bi | moe.
    #[arg(long)]
    fusion: Option<String>,
    /// Cross-validation fold count override.
    #[arg(long)]
    folds: Option<usize>,
    /// Worker threads (default 1 keeps runs bit-deterministic).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report output format.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and persist it under the data directory.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        /// Generator profile preset.
        #[arg(long, value_enum, default_value_t = ProfileName::OpenneuroLike)]
        profile: ProfileName,
    },
    /// Masked-autoencoder pretraining of the time-series encoder.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train a single model on the full cohort.
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Stratified k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: CommonOpts,
        /// Run the four-cell modality/pretraining ablation instead of a
        /// single configuration.
        #[arg(long)]
        grid: bool,
    },
    /// Within-domain or out-of-domain drug protocols.
    Drug {
        #[command(flatten)]
        common: CommonOpts,
        /// Drug arm used for training.
        #[arg(long)]
        train_drug: Option<String>,
        /// Drug arm used for evaluation.
        #[arg(long)]
        test_drug: Option<String>,
    },
    /// Ridge and k-NN probes on fused, raw-connectivity, and PCA features.
    Probe {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Integrated-gradients attribution over fused features.
    Interpret {
        #[command(flatten)]
        common: CommonOpts,
        /// Load a trained model instead of training one in-process.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Path-integral step count.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Render a previously written JSON report to the requested format.
    Report {
        #[command(flatten)]
        common: CommonOpts,
        /// Render the ablation grid report ("ablation").
        #[arg(long)]
        grid: Option<String>,
    },
}

// ---------------------------------------------------------------------------
// report files

#[derive(Serialize, Deserialize)]
struct FoldSummary {
    fold: usize,
    test_ids: Vec<String>,
    metrics: Metrics,
}

#[derive(Serialize, Deserialize)]
struct CvReport {
    mean: Metrics,
    std: Metrics,
    folds: Vec<FoldSummary>,
}

impl CvReport {
    fn from_outcome(outcome: &CvOutcome) -> Self {
        CvReport {
            mean: outcome.mean,
            std: outcome.std,
            folds: outcome
                .folds
                .iter()
                .map(|f| FoldSummary {
                    fold: f.fold,
                    test_ids: f.test_ids.clone(),
                    metrics: f.metrics,
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CellSummary {
    cell: String,
    mean: Metrics,
    std: Metrics,
}

#[derive(Serialize, Deserialize)]
struct AblationReport {
    cells: Vec<CellSummary>,
    pretrain_final_loss: f64,
}

fn metric_cells(m: &Metrics) -> [String; 5] {
    let auroc = m
        .auroc
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "undefined".into());
    [
        format!("{:.2}", m.accuracy),
        format!("{:.2}", m.macro_f1),
        format!("{:.2}", m.bacc),
        auroc,
        format!("{:.2}", m.mcc),
    ]
}

fn render_rows(rows: &[(String, Metrics, Metrics)], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Json => {
            let cells: Vec<CellSummary> = rows
                .iter()
                .map(|(cell, mean, std)| CellSummary {
                    cell: cell.clone(),
                    mean: *mean,
                    std: *std,
                })
                .collect();
            out = serde_json::to_string_pretty(&serde_json::json!({ "cells": cells }))
                .expect("report serializes");
            out.push('\n');
        }
        Format::Csv => {
            out.push_str("cell,accuracy,f1,bacc,auroc,mcc,accuracy_std,f1_std,bacc_std,auroc_std,mcc_std\n");
            for (cell, mean, std) in rows {
                out.push_str(cell);
                for v in metric_cells(mean).iter().chain(metric_cells(std).iter()) {
                    out.push(',');
                    out.push_str(v);
                }
                out.push('\n');
            }
        }
        Format::Md => {
            out.push_str("| cell | accuracy | F1 | BACC | AUROC | MCC |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for (cell, mean, std) in rows {
                out.push_str(&format!("| {cell} |"));
                for (m, s) in metric_cells(mean).iter().zip(metric_cells(std).iter()) {
                    out.push_str(&format!(" {m} ± {s} |"));
                }
                out.push('\n');
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Resolve the effective config from file plus flag overrides.
fn resolve(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let (cfg, warnings) = load_config(path)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.report_dir = out.clone();
    }
    if let Some(m) = &common.modality {
        cfg.experiment.modality = Modality::parse(m)?;
    }
    if common.pretrained {
        cfg.experiment.pretrained = true;
    }
    if let Some(f) = &common.fusion {
        cfg.experiment.fusion = FusionKind::parse(f)?;
    }
    if let Some(k) = common.folds {
        cfg.experiment.folds = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn begin_run(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.report_dir)?;
    write_canonical_json(&cfg.paths.report_dir.join("resolved_config.json"), cfg)?;
    Ok(())
}

/// Load the cohort saved by gen-data, or generate it from the profile.
fn obtain_cohort(cfg: &RunConfig) -> Result<Cohort> {
    if cfg.paths.data_dir.join("manifest.json").exists() {
        load_cohort(&cfg.paths.data_dir)
    } else {
        generate_synthetic_cohort(&cfg.profile, cfg.seed)
    }
}

fn prepare(cfg: &RunConfig, cohort: &Cohort) -> Result<Vec<PreparedSubject>> {
    prepare_cohort(cohort, cfg.profile.n_timepoints, cfg.ts.patch_len)
}

fn fresh_model(cfg: &RunConfig) -> Result<FmmModel<f32>> {
    FmmModel::init(
        cfg.experiment.modality,
        cfg.ts.clone(),
        cfg.fc.clone(),
        cfg.experiment.fusion,
        cfg.seed,
    )
}

/// Seed offset for the unlabeled pretraining corpus.
const CORPUS_SEED_TAG: u64 = 0x707265;

fn run_pretraining(cfg: &RunConfig, model: &mut FmmModel<f32>) -> Result<()> {
    let corpus_cohort = generate_pretrain_corpus(
        cfg.pretrain_subjects,
        cfg.profile.n_rois,
        cfg.profile.n_timepoints,
        cfg.seed ^ CORPUS_SEED_TAG,
    )?;
    let corpus = prepare_tokens(&corpus_cohort, cfg.profile.n_timepoints, cfg.ts.patch_len)?;
    let history = mae_pretrain(model, &corpus, &cfg.pretrain, cfg.seed)?;
    write_history_csv(
        &cfg.paths.report_dir.join("pretrain_history.csv"),
        &history,
    )?;
    model.ts_frozen = true;
    Ok(())
}

/// Build the model for the resolved experiment, reusing a saved pretrained
/// checkpoint when one exists.
fn experiment_model(cfg: &RunConfig) -> Result<FmmModel<f32>> {
    let mut model = fresh_model(cfg)?;
    if cfg.experiment.pretrained {
        if !cfg.experiment.modality.uses_ts() {
            return Err(Error::Config(
                "pretraining applies to the time-series encoder; modality fc has none".into(),
            ));
        }
        let saved = cfg.paths.checkpoint_dir.join("pretrained.fmtc");
        if saved.exists() {
            let loaded = load_checkpoint(&saved)?;
            if loaded.ts != cfg.ts {
                return Err(Error::Config(format!(
                    "pretrained checkpoint {} was built for a different encoder",
                    saved.display()
                )));
            }
            for (name, tensor) in &loaded.params {
                if name.starts_with("ts.") {
                    model.params.insert(name.clone(), tensor.clone());
                }
            }
            model.pretrained = true;
            model.ts_frozen = true;
        } else {
            run_pretraining(cfg, &mut model)?;
        }
    }
    Ok(model)
}

fn emit(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_gen_data(common: &CommonOpts, profile: ProfileName) -> Result<()> {
    let mut cfg = resolve(common)?;
    if common.config.is_none() {
        cfg.profile = match profile {
            ProfileName::OpenneuroLike => GeneratorProfile::openneuro_like(),
            ProfileName::Fidelity => GeneratorProfile::fidelity(),
        };
    }
    begin_run(&cfg)?;
    let cohort = generate_synthetic_cohort(&cfg.profile, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.paths.data_dir = out.clone();
    }
    save_cohort(&cohort, &cfg.paths.data_dir)?;
    let (pos, neg) = cohort.label_counts();
    println!(
        "generated {} subjects ({} responders, {} non-responders) into {}",
        cohort.subjects.len(),
        pos,
        neg,
        cfg.paths.data_dir.display()
    );
    println!("fingerprint {}", cfg.profile.fingerprint(cfg.seed));
    Ok(())
}

fn cmd_pretrain(common: &CommonOpts) -> Result<()> {
    let mut cfg = resolve(common)?;
    if !cfg.experiment.modality.uses_ts() {
        cfg.experiment.modality = Modality::Both;
    }
    begin_run(&cfg)?;
    let mut model = fresh_model(&cfg)?;
    run_pretraining(&cfg, &mut model)?;
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    let path = cfg.paths.checkpoint_dir.join("pretrained.fmtc");
    save_checkpoint(&model, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(common: &CommonOpts) -> Result<()> {
    let cfg = resolve(common)?;
    begin_run(&cfg)?;
    let cohort = obtain_cohort(&cfg)?;
    let subjects = prepare(&cfg, &cohort)?;
    let mut model = experiment_model(&cfg)?;
    let history = fmm_tc::harness::train_model(
        &mut model,
        &subjects,
        None,
        &cfg.experiment.train,
        cfg.seed,
    )?;
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    let ckpt = cfg.paths.checkpoint_dir.join("model.fmtc");
    save_checkpoint(&model, &ckpt)?;
    let mut csv = String::from("epoch,train_loss\n");
    for e in &history.epochs {
        csv.push_str(&format!("{},{}\n", e.epoch, e.train_loss));
    }
    emit(&cfg.paths.report_dir.join("train_history.csv"), &csv)?;
    let scores = predict(&model, &subjects)?;
    let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
    let metrics = fmm_tc::harness::compute_metrics(&scores, &labels)?;
    write_canonical_json(
        &cfg.paths.report_dir.join("train_report.json"),
        &serde_json::json!({ "train_metrics": metrics, "best_epoch": history.best_epoch }),
    )?;
    println!(
        "trained {} epochs (best {}), wrote {}",
        history.epochs.len(),
        history.best_epoch,
        ckpt.display()
    );
    Ok(())
}

fn cmd_cv(common: &CommonOpts, grid: bool) -> Result<()> {
    let cfg = resolve(common)?;
    begin_run(&cfg)?;
    if grid {
        let spec = AblationSpec {
            profile: cfg.profile.clone(),
            seed: cfg.seed,
            folds: cfg.experiment.folds,
            fusion: cfg.experiment.fusion,
            train: cfg.experiment.train.clone(),
            pretrain: cfg.pretrain.clone(),
            pretrain_subjects: cfg.pretrain_subjects,
        };
        let outcome = run_ablation(&spec)?;
        let cells: Vec<(&str, &CvOutcome)> = vec![
            ("ts_only", &outcome.ts_only),
            ("fc_only", &outcome.fc_only),
            ("both_scratch", &outcome.both_scratch),
            ("both_pretrained", &outcome.both_pretrained),
        ];
        let report = AblationReport {
            cells: cells
                .iter()
                .map(|(name, o)| CellSummary {
                    cell: (*name).into(),
                    mean: o.mean,
                    std: o.std,
                })
                .collect(),
            pretrain_final_loss: outcome
                .pretrain_history
                .last()
                .map(|e| e.loss)
                .unwrap_or(f64::NAN),
        };
        write_canonical_json(&cfg.paths.report_dir.join("ablation_report.json"), &report)?;
        let rows: Vec<(String, Metrics, Metrics)> = cells
            .iter()
            .map(|(name, o)| ((*name).to_string(), o.mean, o.std))
            .collect();
        print!("{}", render_rows(&rows, Format::Md));
        println!(
            "wrote {}",
            cfg.paths.report_dir.join("ablation_report.json").display()
        );
        return Ok(());
    }
    let cohort = obtain_cohort(&cfg)?;
    let subjects = prepare(&cfg, &cohort)?;
    let template = experiment_model(&cfg)?;
    let outcome = run_cv(
        &template,
        &subjects,
        cfg.experiment.folds,
        &cfg.experiment.train,
        cfg.seed,
    )?;
    fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    for fold in &outcome.folds {
        save_checkpoint(
            &fold.model,
            &cfg.paths.checkpoint_dir.join(format!("fold_{}.fmtc", fold.fold)),
        )?;
    }
    let report = CvReport::from_outcome(&outcome);
    write_canonical_json(&cfg.paths.report_dir.join("cv_report.json"), &report)?;
    let rows = vec![("cv".to_string(), outcome.mean, outcome.std)];
    print!("{}", render_rows(&rows, Format::Md));
    println!("wrote {}", cfg.paths.report_dir.join("cv_report.json").display());
    Ok(())
}

fn cmd_drug(
    common: &CommonOpts,
    train_drug: Option<String>,
    test_drug: Option<String>,
) -> Result<()> {
    let cfg = resolve(common)?;
    begin_run(&cfg)?;
    let (train_drug, test_drug) = match (train_drug, test_drug, &cfg.experiment.protocol) {
        (Some(a), Some(b), _) => (a, b),
        (Some(a), None, _) => (a.clone(), a),
        (None, None, Protocol::DrugSpecific { train_drug, test_drug }) => {
            (train_drug.clone(), test_drug.clone())
        }
        _ => {
            return Err(Error::Config(
                "drug protocol needs --train-drug/--test-drug or a drug_specific config".into(),
            ))
        }
    };
    let cohort = obtain_cohort(&cfg)?;
    let subjects = prepare(&cfg, &cohort)?;
    let template = experiment_model(&cfg)?;
    let seeds: Vec<u64> = (0..5).map(|i| cfg.seed + i).collect();
    let outcome = if train_drug == test_drug {
        drug_within(
            &template,
            &subjects,
            &train_drug,
            cfg.experiment.folds,
            &cfg.experiment.train,
            &seeds,
        )?
    } else {
        drug_cross(
            &template,
            &subjects,
            &train_drug,
            &test_drug,
            &cfg.experiment.train,
            &seeds,
        )?
    };
    write_canonical_json(
        &cfg.paths.report_dir.join("drug_report.json"),
        &serde_json::json!({
            "train_drug": train_drug,
            "test_drug": test_drug,
            "runs": outcome.runs,
            "mean": outcome.mean,
            "std": outcome.std,
        }),
    )?;
    let rows = vec![(
        format!("{train_drug}->{test_drug}"),
        outcome.mean,
        outcome.std,
    )];
    print!("{}", render_rows(&rows, Format::Md));
    println!(
        "wrote {}",
        cfg.paths.report_dir.join("drug_report.json").display()
    );
    Ok(())
}

fn cmd_probe(common: &CommonOpts) -> Result<()> {
    let cfg = resolve(common)?;
    begin_run(&cfg)?;
    let cohort = obtain_cohort(&cfg)?;
    let subjects = prepare(&cfg, &cohort)?;
    let mut model = experiment_model(&cfg)?;
    fmm_tc::harness::train_model(&mut model, &subjects, None, &cfg.experiment.train, cfg.seed)?;
    let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
    let fused = fused_features(&model, &subjects)?;
    let raw = raw_fc_features(&subjects);
    let pca = pca_features(&raw, 10)?;
    let mut rows = Vec::new();
    for (name, feats) in [("fused", &fused), ("raw_fc", &raw), ("pca", &pca)] {
        let ridge = linear_probe(feats, &labels, cfg.experiment.folds, cfg.seed)?;
        let knn = knn_probe(feats, &labels, cfg.experiment.folds, cfg.seed)?;
        rows.push((format!("{name}/ridge"), ridge, Metrics::zero()));
        rows.push((format!("{name}/knn"), knn, Metrics::zero()));
    }
    let report: Vec<serde_json::Value> = rows
        .iter()
        .map(|(name, m, _)| serde_json::json!({ "probe": name, "metrics": m }))
        .collect();
    write_canonical_json(
        &cfg.paths.report_dir.join("probe_report.json"),
        &serde_json::json!({ "probes": report }),
    )?;
    print!("{}", render_rows(&rows, Format::Md));
    println!(
        "wrote {}",
        cfg.paths.report_dir.join("probe_report.json").display()
    );
    Ok(())
}

fn cmd_interpret(common: &CommonOpts, checkpoint: Option<PathBuf>, steps: usize) -> Result<()> {
    let cfg = resolve(common)?;
    begin_run(&cfg)?;
    let cohort = obtain_cohort(&cfg)?;
    let model = match checkpoint {
        Some(path) => load_checkpoint(&path)?,
        None => {
            let subjects = prepare(&cfg, &cohort)?;
            let mut model = experiment_model(&cfg)?;
            fmm_tc::harness::train_model(
                &mut model,
                &subjects,
                None,
                &cfg.experiment.train,
                cfg.seed,
            )?;
            model
        }
    };
    let subjects = prepare(&cfg, &cohort)?;
    let mut entries = Vec::new();
    for s in &subjects {
        let a = attribute_subject(&model, s, steps)?;
        entries.push((s.id.clone(), steps, a));
    }
    write_attributions_json(&cfg.paths.report_dir.join("attribution.json"), &entries)?;
    write_profile_csv(
        &cfg.paths.report_dir.join("attribution_profile.csv"),
        &entries,
    )?;
    if model.modality == Modality::Both && model.fusion == FusionKind::Concat {
        let m = model.ts.model_dim;
        let mut ts_share = 0.0;
        let mut fc_share = 0.0;
        for (_, _, a) in &entries {
            let (t, f) = modality_importance(a, m)?;
            ts_share += t;
            fc_share += f;
        }
        let n = entries.len() as f64;
        println!(
            "mean modality importance: ts {:.4}, fc {:.4}",
            ts_share / n,
            fc_share / n
        );
    }
    println!(
        "wrote {} attributions under {}",
        entries.len(),
        cfg.paths.report_dir.display()
    );
    Ok(())
}

fn cmd_report(common: &CommonOpts, grid: Option<String>) -> Result<()> {
    let cfg = resolve(common)?;
    let format = common.format;
    let (rows, stem) = match grid.as_deref() {
        Some("ablation") => {
            let path = cfg.paths.report_dir.join("ablation_report.json");
            let text = fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!(
                    "cannot read {} (run `cv --grid` first): {e}",
                    path.display()
                ))
            })?;
            let report: AblationReport = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let rows: Vec<(String, Metrics, Metrics)> = report
                .cells
                .iter()
                .map(|c| (c.cell.clone(), c.mean, c.std))
                .collect();
            (rows, "ablation_summary")
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown grid `{other}` (expected: ablation)"
            )))
        }
        None => {
            let path = cfg.paths.report_dir.join("cv_report.json");
            let text = fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!(
                    "cannot read {} (run `cv` first): {e}",
                    path.display()
                ))
            })?;
            let report: CvReport = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let mut rows: Vec<(String, Metrics, Metrics)> = report
                .folds
                .iter()
                .map(|f| (format!("fold_{}", f.fold), f.metrics, Metrics::zero()))
                .collect();
            rows.push(("mean".into(), report.mean, report.std));
            (rows, "cv_summary")
        }
    };
    let text = render_rows(&rows, format);
    let ext = match format {
        Format::Json => "json",
        Format::Csv => "csv",
        Format::Md => "md",
    };
    let out = cfg.paths.report_dir.join(format!("{stem}.{ext}"));
    print!("{text}");
    emit(&out, &text)?;
    Ok(())
}

// ---------------------------------------------------------------------------

fn common_of(cmd: &Command) -> &CommonOpts {
    match cmd {
        Command::GenData { common, .. }
        | Command::Pretrain { common }
        | Command::Train { common }
        | Command::Cv { common, .. }
        | Command::Drug { common, .. }
        | Command::Probe { common }
        | Command::Interpret { common, .. }
        | Command::Report { common, .. } => common,
    }
}

/// Configuration problems are usage errors (exit 2); everything after a valid
/// configuration is a domain error (exit 1).
fn is_usage(err: &Error) -> bool {
    matches!(err, Error::Config(_) | Error::InvalidArgument(_))
}

fn run(cli: Cli) -> Result<()> {
    let jobs = common_of(&cli.cmd).jobs;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.cmd {
        Command::GenData { common, profile } => cmd_gen_data(&common, profile),
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Train { common } => cmd_train(&common),
        Command::Cv { common, grid } => cmd_cv(&common, grid),
        Command::Drug {
            common,
            train_drug,
            test_drug,
        } => cmd_drug(&common, train_drug, test_drug),
        Command::Probe { common } => cmd_probe(&common),
        Command::Interpret {
            common,
            checkpoint,
            steps,
        } => cmd_interpret(&common, checkpoint, steps),
        Command::Report { common, grid } => cmd_report(&common, grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
