use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use squid::config::RunConfig;
use squid::digitanatomy::AnomalyMix;
use squid::eval::write_scores_csv;
use squid::{pipeline, Variant};

#[derive(Parser)]
#[command(name = "squid", version, about = "Space-aware memory queues for unsupervised anomaly detection")]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override such as `train.epochs=30` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Overrides `seed` (and `digitanatomy.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a DigitAnatomy dataset from an MNIST-style digit archive.
    GenDigitanatomy {
        #[arg(long, default_value = "data/digits")]
        bank: PathBuf,
        /// Defaults to `data.root`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        /// Normal test images.
        #[arg(long)]
        n_normal: Option<usize>,
        /// Abnormal test images.
        #[arg(long)]
        n_abnormal: Option<usize>,
        #[arg(long)]
        n_val_normal: Option<usize>,
        #[arg(long)]
        n_val_abnormal: Option<usize>,
        /// e.g. `missing=0.25,misorder=0.25,flipped=0.25,novel=0.25`
        #[arg(long)]
        mix: Option<AnomalyMix>,
    },
    /// Train on the normal training split; writes `best.safetensors` and `metrics.csv`.
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
        /// Defaults to `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the score normalisation on training images and store it with the checkpoint.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate on the test split; writes `metrics.csv`, `roc.csv` and `scores.csv`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score arbitrary images with a calibrated checkpoint.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and evaluate the full model and every ablation, then write `ablation.csv`.
    Ablate {
        /// Comma-separated subset; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
        overrides.push(format!("digitanatomy.seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenDigitanatomy { bank, out, n_train, n_normal, n_abnormal, n_val_normal, n_val_abnormal, mix } => {
            let gen = &mut cfg.digitanatomy;
            gen.train_normal = n_train.unwrap_or(gen.train_normal);
            gen.test.normal = n_normal.unwrap_or(gen.test.normal);
            gen.test.abnormal = n_abnormal.unwrap_or(gen.test.abnormal);
            gen.val.normal = n_val_normal.unwrap_or(gen.val.normal);
            gen.val.abnormal = n_val_abnormal.unwrap_or(gen.val.abnormal);
            if let Some(mix) = mix {
                gen.mix = mix;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.data.root.clone());
            let manifest = pipeline::gen_digitanatomy(&bank, &out, &cfg.digitanatomy)?;
            println!("wrote {} images to {}", manifest.entries.len(), out.display());
        }
        Command::Train { variant, out } => {
            let variant = Variant::parse(&variant)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let (_, report) = pipeline::train(&cfg, variant, &out)?;
            println!("checkpoint {} (epoch {}, val AUC {:?})", report.checkpoint.display(), report.best_epoch, report.best_val_auc);
        }
        Command::Calibrate { checkpoint } => {
            let cal = pipeline::calibrate_checkpoint(&cfg, &checkpoint)?;
            println!("mu {:.6} sigma {:.6} polarity {:+} ({} images)", cal.mu, cal.sigma, cal.polarity, cal.samples);
        }
        Command::Eval { checkpoint, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(".".as_ref()).join("eval"));
            let report = pipeline::eval_checkpoint(&cfg, &checkpoint, &out)?;
            let p = &report.at_threshold;
            println!("AUC {:.4} acc {:.4} F1 {:.4} sens {:.4} spec {:.4}", report.auc, p.acc, p.f1, p.sensitivity, p.specificity);
        }
        Command::Score { checkpoint, out, images } => {
            let records = pipeline::score_images(&checkpoint, &images, cfg.device()?)?;
            match out {
                Some(path) => write_scores_csv(&path, &records)?,
                None => {
                    println!("path,raw_d,score");
                    for r in &records {
                        println!("{},{},{}", r.path, r.raw_d, r.score);
                    }
                }
            }
        }
        Command::Ablate { variants } => {
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<squid::Result<_>>()?
            };
            let rows = pipeline::ablate(&cfg, &variants)?;
            for r in rows {
                println!("{:<24} AUC {:.4} acc {:.4} F1 {:.4}", r.variant, r.auc, r.acc, r.f1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()).context("squid") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
