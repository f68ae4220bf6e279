//! Space-aware memory queue: one circular region per patch location.
//!
//! cargo run --example memory_queue

use squid::memory::{partition_regions, AccessKind, MemoryQueue, Shrinkage};
use squid::Mode;
use tch::{Device, Kind, Tensor};

fn main() -> squid::Result<()> {
    // Circular overwrite within one region of capacity 3.
    let mut q = MemoryQueue::from_patterns(&Tensor::zeros([1, 3, 1], (Kind::Float, Device::Cpu)))?;
    for x in 1..=5 {
        q.update(0, &Tensor::from_slice(&[x as f32]).view([1, 1]), Mode::Train)?;
        let slots = Vec::<f32>::try_from(q.region(0).flatten(0, -1)).unwrap();
        println!("insert {x}: slots {slots:?} pointer {}", q.pointer(0));
    }

    // A 2x2 grid: every patch reads and writes only its own region.
    let map = partition_regions(2, 2)?;
    let mut q = MemoryQueue::new(map.n_regions(), 16, 8, Device::Cpu)?;
    q.enable_access_log();
    let batch = 4;
    let f = Tensor::randn([batch * 4, 8], (Kind::Float, Device::Cpu));
    let assembled = q.query_grid(&map, &f, 5, Shrinkage::Gumbel)?;
    q.update_grid(&map, &f, Mode::Train)?;
    println!("assembled {:?}, fills {:?}", assembled.size(), q.fills());
    let log = q.take_access_log();
    let crossed = log.iter().filter(|a| a.patch.is_some_and(|p| map.region_of_patch(p) != a.region)).count();
    let updates = log.iter().filter(|a| a.kind == AccessKind::Update).count();
    println!("{} accesses ({updates} updates), {crossed} across regions", log.len());

    // Queries are not allowed to write at inference.
    match q.update_grid(&map, &f, Mode::Infer) {
        Err(e) => println!("inference update rejected: {e}"),
        Ok(()) => unreachable!(),
    }
    Ok(())
}
