//! Generate DigitAnatomy (if needed), train SQUID on its normal images,
//! calibrate and evaluate on the test split.
//!
//! cargo run --release --example train_digitanatomy -- --out runs/digits --epochs 30

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use squid::data::{LabelledImages, SplitFiles};
use squid::digitanatomy::{generate_dataset, DigitBank, GenConfig, MANIFEST_FILE};
use squid::eval::{calibrate, evaluate};
use squid::training::{fit, TrainConfig, Validation};
use squid::{Squid, SquidConfig, Variant};
use tch::Device;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "data/digits")]
    bank: PathBuf,
    #[arg(long, default_value = "runs/digitanatomy")]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    variant: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let data = args.out.join("data");
    if !data.join(MANIFEST_FILE).exists() {
        let bank = DigitBank::load(&args.bank)?;
        let gen = GenConfig { train_normal: args.n_train, seed: args.seed, ..Default::default() };
        generate_dataset(&gen, &bank, &data)?;
    }
    let files = SplitFiles::from_digitanatomy(&data)?;
    let mut cfg = SquidConfig::digit_anatomy();
    let variant = Variant::parse(&args.variant)?;
    variant.apply(&mut cfg);
    let mut train_cfg = TrainConfig { epochs: args.epochs, ..Default::default() };
    if !variant.distillation() {
        train_cfg.weights.distillation = 0.0;
    }
    let size = cfg.network.input_size as u32;
    let train = LabelledImages::load(&files.train, size)?;
    let val = LabelledImages::load(&files.val, size)?;
    let test = LabelledImages::load(&files.test, size)?;

    let model = Squid::new(&cfg, args.seed, Device::Cpu)?;
    let run = args.out.join(variant.name());
    let (mut model, report) = fit(model, &train_cfg, args.seed, &train.images, Some(Validation { images: &val.images, labels: &val.labels }), &run, Some(variant.name()))?;
    println!("best epoch {} (val AUC {:?})", report.best_epoch, report.best_val_auc);

    let val_raw = model.raw_scores(&val.images)?;
    let cal = calibrate(&mut model, &train.images, None)?.orient(&val_raw, &val.labels)?;
    let (eval, _, _) = evaluate(&mut model, Some(&cal), &test.images, &test.labels, 0.5)?;
    println!(
        "{}: test AUC {:.4}  acc {:.4}  F1 {:.4}  (best-F1 {:.4} at {:.4})",
        variant.name(),
        eval.auc,
        eval.at_threshold.acc,
        eval.at_threshold.f1,
        eval.best_f1.f1,
        eval.best_f1.threshold
    );
    Ok(())
}
