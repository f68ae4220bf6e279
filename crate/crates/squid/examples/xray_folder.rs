//! Train and evaluate on a radiograph folder such as the pediatric pneumonia
//! release (`<root>/{train,test}/{NORMAL,PNEUMONIA}`).
//!
//! cargo run --release --example xray_folder -- --root data/zhanglab --epochs 200

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use squid::config::{DataKind, RunConfig};
use squid::pipeline::{calibrate_checkpoint, eval_checkpoint, split_files, train};
use squid::Variant;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    root: PathBuf,
    /// `zhanglab` or `chexpert-folders`.
    #[arg(long, default_value = "zhanglab")]
    layout: String,
    #[arg(long, default_value = "runs/xray")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = RunConfig { seed: args.seed, out_dir: args.out.clone(), ..Default::default() };
    cfg.data.kind = match args.layout.as_str() {
        "zhanglab" => DataKind::Zhanglab,
        "chexpert-folders" => DataKind::ChexpertFolders,
        other => anyhow::bail!("unknown layout {other:?}"),
    };
    cfg.data.root = args.root;
    cfg.train.epochs = args.epochs;
    cfg.validate()?;

    let files = split_files(&cfg)?;
    println!("train {} normal, val {}, test {}", files.train.len(), files.val.len(), files.test.len());
    let (_, report) = train(&cfg, Variant::Full, &args.out)?;
    let cal = calibrate_checkpoint(&cfg, &report.checkpoint)?;
    println!("calibration mu {:.5} sigma {:.5} polarity {:+}", cal.mu, cal.sigma, cal.polarity);
    let eval = eval_checkpoint(&cfg, &report.checkpoint, &args.out.join("eval"))?;
    let p = &eval.at_threshold;
    println!("test AUC {:.4} acc {:.4} F1 {:.4}", eval.auc, p.acc, p.f1);
    Ok(())
}
