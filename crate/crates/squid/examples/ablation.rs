//! Train each ablation variant on the same DigitAnatomy data and seed and
//! compare test AUC. Results land in `<out>/ablation.csv`.
//!
//! cargo run --release --example ablation -- --epochs 5 --variants full,no-space-aware

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use squid::config::RunConfig;
use squid::digitanatomy::MANIFEST_FILE;
use squid::pipeline::{ablate, gen_digitanatomy};
use squid::Variant;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "data/digits")]
    bank: PathBuf,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = RunConfig::digit_anatomy();
    cfg.seed = args.seed;
    cfg.out_dir = args.out.clone();
    cfg.train.epochs = args.epochs;
    cfg.digitanatomy.train_normal = args.n_train;
    cfg.digitanatomy.seed = args.seed;
    cfg.data.root = args.out.join("data");
    cfg.validate()?;
    if !cfg.data.root.join(MANIFEST_FILE).exists() {
        gen_digitanatomy(&args.bank, &cfg.data.root, &cfg.digitanatomy)?;
    }
    let variants = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants.iter().map(|v| Variant::parse(v)).collect::<squid::Result<_>>()?
    };
    println!("{:<26}{:>8}{:>8}{:>8}", "variant", "AUC", "acc", "F1");
    for r in ablate(&cfg, &variants)? {
        println!("{:<26}{:>8.4}{:>8.4}{:>8.4}", r.variant, r.auc, r.acc, r.f1);
    }
    Ok(())
}
