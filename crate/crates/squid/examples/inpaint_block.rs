//! Feature in-painting: each patch feature is refined from memory-assembled
//! normal patterns of its eight neighbours, then gated by the masked shortcut.
//!
//! cargo run --example inpaint_block

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use squid::inpaint::{InpaintBlock, InpaintConfig, InpaintStep, PatchMemory};
use squid::memory::{partition_regions, MemoryQueue, Shrinkage};
use squid::Mode;
use tch::{nn, Device, Kind, Tensor};

fn main() -> squid::Result<()> {
    tch::manual_seed(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vs = nn::VarStore::new(Device::Cpu);
    let (grid, shape) = ([3, 3], (16, 4, 4));
    let block = InpaintBlock::new(vs.root() / "inpaint", &InpaintConfig::default(), grid, shape)?;
    let map = partition_regions(3, 3)?;
    let mut memory = PatchMemory::Queue(MemoryQueue::new(map.n_regions(), 32, block.token_dim() as usize, Device::Cpu)?);

    let f = Tensor::randn([2 * 9, shape.0, shape.1, shape.2], (Kind::Float, Device::Cpu));
    let step = |mode, update_memory| InpaintStep { mode, update_memory, top_k: 5, shrinkage: Shrinkage::Gumbel };

    let train = block.forward(&f, &mut memory, &map, step(Mode::Train, true), &mut rng)?;
    let per_location_kept = train.eq_tensor(&f).all_dim(1, false).to_kind(Kind::Float).mean(Kind::Float).double_value(&[]);
    println!("train: output {:?}, share of locations passed through unchanged {per_location_kept:.3}", train.size());
    println!("queue fills after one training pass: {:?}", memory.as_queue().unwrap().fills());

    let a = tch::no_grad(|| block.forward(&f, &mut memory, &map, step(Mode::Infer, false), &mut rng))?;
    let b = tch::no_grad(|| block.forward(&f, &mut memory, &map, step(Mode::Infer, false), &mut rng))?;
    println!("inference is deterministic: {}", a.equal(&b));
    Ok(())
}
