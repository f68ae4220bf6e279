//! Score image files with a trained and calibrated checkpoint.
//!
//! cargo run --release --example score_images -- --checkpoint runs/digitanatomy/full/best.safetensors img1.png img2.png

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use squid::pipeline::score_images;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

fn main() -> Result<()> {
    let args = Args::parse();
    let mut records = score_images(&args.checkpoint, &args.images, tch::Device::Cpu)?;
    records.sort_by(|a, b| b.score.total_cmp(&a.score));
    for r in records {
        println!("{:.4}  (D = {:.5})  {}", r.score, r.raw_d, r.path);
    }
    Ok(())
}
