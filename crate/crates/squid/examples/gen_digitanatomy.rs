//! Render a small DigitAnatomy dataset and a preview sheet of normal and
//! abnormal grids.
//!
//! cargo run --release --example gen_digitanatomy -- --out runs/da-preview

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use image::GrayImage;
use squid::digitanatomy::{generate_dataset, DigitBank, GenConfig, SplitCounts, Split};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "data/digits")]
    bank: PathBuf,
    #[arg(long, default_value = "runs/da-preview")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let bank = DigitBank::load(&args.bank)?;
    let cfg = GenConfig {
        train_normal: 16,
        val: SplitCounts { normal: 4, abnormal: 4 },
        test: SplitCounts { normal: 8, abnormal: 8 },
        seed: args.seed,
        ..Default::default()
    };
    let manifest = generate_dataset(&cfg, &bank, &args.out)?;
    println!("{} images under {}", manifest.entries.len(), args.out.display());

    let test: Vec<_> = manifest.split(Split::Test).collect();
    let mut sheet = GrayImage::new(96 * 8, 96 * 2);
    for (row, abnormal) in [false, true].into_iter().enumerate() {
        for (col, e) in test.iter().filter(|e| e.abnormal == abnormal).take(8).enumerate() {
            let img = image::open(manifest.root.join(&e.path))?.to_luma8();
            image::imageops::replace(&mut sheet, &img, col as i64 * 96, row as i64 * 96);
            if abnormal {
                let conds: Vec<String> = e.conditions.iter().map(|c| c.to_string()).collect();
                println!("{}: {}", e.path.display(), conds.join(","));
            }
        }
    }
    let preview = args.out.join("preview.png");
    sheet.save(&preview)?;
    println!("preview (top: normal, bottom: abnormal) at {}", preview.display());
    Ok(())
}
