//! End-to-end commands shared by the CLI and the examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, SaveInfo};
use crate::config::{DataKind, RunConfig};
use crate::data::{ingest_xray_folder, LabelledImages, SplitFiles};
use crate::digitanatomy::{generate_dataset, DatasetManifest, DigitBank, GenConfig};
use crate::error::{Result, SquidError};
use crate::eval::{calibrate, evaluate, write_scores_csv, Calibration, EvalReport, ScoreRecord};
use crate::model::{Squid, Variant};
use crate::training::{fit, FitReport, Validation};

/// Generates a DigitAnatomy dataset from the digit archive at `bank`.
pub fn gen_digitanatomy(bank: &Path, out: &Path, cfg: &GenConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let bank = DigitBank::load(bank)?;
    generate_dataset(cfg, &bank, out)
}

/// Training, validation and test file lists for the configured dataset.
pub fn split_files(cfg: &RunConfig) -> Result<SplitFiles> {
    let root = cfg.data.root.clone();
    let mut files = match cfg.data.kind {
        DataKind::Digitanatomy => SplitFiles::from_digitanatomy(&root)?,
        _ => {
            let ingest = cfg.data.ingest(cfg.model.network.input_size as u32, cfg.seed).expect("radiograph layout");
            ingest_xray_folder(&root, &ingest)?.files
        }
    };
    if let Some(n) = cfg.data.max_train {
        files.train.truncate(n);
    }
    if files.train.is_empty() {
        return Err(SquidError::Empty("training split"));
    }
    Ok(files)
}

fn load(files: &[(PathBuf, bool)], cfg: &RunConfig) -> Result<LabelledImages> {
    LabelledImages::load(files, cfg.model.network.input_size as u32)
}

fn has_both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Applies an ablation toggle to a run configuration.
pub fn with_variant(cfg: &RunConfig, variant: Variant) -> RunConfig {
    let mut cfg = cfg.clone();
    variant.apply(&mut cfg.model);
    if !variant.distillation() {
        cfg.train.weights.distillation = 0.0;
    }
    cfg
}

/// Trains into `out` (`best.safetensors`, `metrics.csv`, `config.toml`).
pub fn train(cfg: &RunConfig, variant: Variant, out: &Path) -> Result<(Squid, FitReport)> {
    let cfg = with_variant(cfg, variant);
    cfg.validate()?;
    let files = split_files(&cfg)?;
    let train = load(&files.train, &cfg)?;
    let val = load(&files.val, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| SquidError::io(out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| SquidError::io(&cfg_path, e))?;
    let model = Squid::new(&cfg.model, cfg.seed, cfg.device()?)?;
    let validation = has_both_classes(&val.labels).then_some(Validation { images: &val.images, labels: &val.labels });
    fit(model, &cfg.train, cfg.seed, &train.images, validation, out, Some(variant.name()))
}

/// Calibrates a checkpoint on its training split and stores the record in its sidecar.
pub fn calibrate_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Calibration> {
    let (mut model, mut meta) = checkpoint::load(ckpt, cfg.device()?)?;
    let mut cfg = cfg.clone();
    cfg.model = meta.model.clone();
    let files = split_files(&cfg)?;
    let train = load(&files.train, &cfg)?;
    let mut cal = calibrate(&mut model, &train.images, cfg.eval.calibration_cap)?;
    let val = load(&files.val, &cfg)?;
    if has_both_classes(&val.labels) {
        cal = cal.orient(&model.raw_scores(&val.images)?, &val.labels)?;
    } else {
        log::warn!("validation split lacks one class; keeping polarity +1");
    }
    meta.calibration = Some(cal);
    checkpoint::write_meta(ckpt, &meta)?;
    Ok(cal)
}

/// Scores the test split and writes `metrics.csv`, `roc.csv` and `scores.csv` into `out`.
pub fn eval_checkpoint(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<EvalReport> {
    let (mut model, meta) = checkpoint::load(ckpt, cfg.device()?)?;
    let cal = meta.calibration.ok_or(SquidError::Uncalibrated)?;
    let mut cfg = cfg.clone();
    cfg.model = meta.model.clone();
    let files = split_files(&cfg)?;
    let test = load(&files.test, &cfg)?;
    let (report, raw, scores) = evaluate(&mut model, Some(&cal), &test.images, &test.labels, cfg.eval.threshold)?;
    std::fs::create_dir_all(out).map_err(|e| SquidError::io(out, e))?;
    report.write_metrics_csv(&out.join("metrics.csv"))?;
    report.write_roc_csv(&out.join("roc.csv"))?;
    let records: Vec<ScoreRecord> = test
        .paths
        .iter()
        .zip(&test.labels)
        .zip(raw.iter().zip(&scores))
        .map(|((p, &l), (&d, &s))| ScoreRecord { path: p.display().to_string(), label: Some(l as u8), raw_d: d, score: s })
        .collect();
    write_scores_csv(&out.join("scores.csv"), &records)?;
    Ok(report)
}

/// Scores arbitrary image files with a calibrated checkpoint.
pub fn score_images(ckpt: &Path, paths: &[PathBuf], device: tch::Device) -> Result<Vec<ScoreRecord>> {
    if paths.is_empty() {
        return Err(SquidError::Empty("image list"));
    }
    let (mut model, meta) = checkpoint::load(ckpt, device)?;
    let cal = meta.calibration.ok_or(SquidError::Uncalibrated)?;
    let items: Vec<(PathBuf, bool)> = paths.iter().map(|p| (p.clone(), false)).collect();
    let images = LabelledImages::load(&items, meta.model.network.input_size as u32)?;
    let raw = model.raw_scores(&images.images)?;
    Ok(paths.iter().zip(raw).map(|(p, d)| ScoreRecord { path: p.display().to_string(), label: None, raw_d: d, score: cal.score(d) }).collect())
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub best_epoch: usize,
    pub val_auc: Option<f64>,
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Trains, calibrates and evaluates each variant under `cfg.out_dir/<variant>`,
/// then writes `cfg.out_dir/ablation.csv`.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in variants {
        log::info!("ablation: {}", v.name());
        let dir = cfg.out_dir.join(v.name());
        let (_, report) = train(cfg, v, &dir)?;
        let vcfg = with_variant(cfg, v);
        calibrate_checkpoint(&vcfg, &report.checkpoint)?;
        let eval = eval_checkpoint(&vcfg, &report.checkpoint, &dir.join("eval"))?;
        rows.push(AblationRow {
            variant: v.name().into(),
            best_epoch: report.best_epoch,
            val_auc: report.best_val_auc,
            auc: eval.auc,
            acc: eval.at_threshold.acc,
            f1: eval.at_threshold.f1,
            sensitivity: eval.at_threshold.sensitivity,
            specificity: eval.at_threshold.specificity,
        });
        let path = cfg.out_dir.join("ablation.csv");
        let mut w = crate::eval::csv_writer(&path)?;
        for r in &rows {
            w.serialize(r).map_err(|e| crate::eval::csv_error(&path, e))?;
        }
        w.flush().map_err(|e| SquidError::io(&path, e))?;
    }
    Ok(rows)
}

/// Saves `model` with a calibration record next to its weights.
pub fn save_calibrated(model: &Squid, cal: Calibration, path: &Path) -> Result<()> {
    checkpoint::save(model, &SaveInfo { calibration: Some(cal), ..Default::default() }, path)
}
