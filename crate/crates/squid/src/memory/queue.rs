use std::sync::Mutex;

use tch::{Device, Kind, Tensor};

use super::{assemble, l2_normalize, RegionMap, Shrinkage};
use crate::error::{Result, SquidError};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Query,
    Update,
}

/// One instrumented read or write of a queue region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueAccess {
    /// Patch that issued the access, when issued through a patch grid.
    pub patch: Option<usize>,
    pub region: usize,
    pub kind: AccessKind,
}

/// Gradient-free circular store of previously seen patch features.
///
/// Storage is `[regions, capacity, dim]`. Each region has its own write pointer;
/// new features overwrite the oldest slot. Stored patterns never require grad.
#[derive(Debug)]
pub struct MemoryQueue {
    patterns: Tensor,
    pointers: Vec<usize>,
    fills: Vec<usize>,
    access_log: Mutex<Option<Vec<QueueAccess>>>,
}

impl MemoryQueue {
    /// Random unit-norm patterns, all regions empty.
    pub fn new(regions: usize, capacity: usize, dim: usize, device: Device) -> Result<Self> {
        if regions == 0 || capacity == 0 || dim == 0 {
            return Err(SquidError::InvalidArgument(format!(
                "queue needs positive regions/capacity/dim, got {regions}/{capacity}/{dim}"
            )));
        }
        let init = l2_normalize(&Tensor::randn([regions as i64, capacity as i64, dim as i64], (Kind::Float, device)));
        Ok(MemoryQueue {
            patterns: init,
            pointers: vec![0; regions],
            fills: vec![0; regions],
            access_log: Mutex::new(None),
        })
    }

    /// Queue with the given `[regions, capacity, dim]` content, every slot counted as filled.
    pub fn from_patterns(patterns: &Tensor) -> Result<Self> {
        let size = patterns.size();
        if size.len() != 3 || size.iter().any(|&s| s == 0) {
            return Err(SquidError::shape("[regions, capacity, dim]", format!("{size:?}")));
        }
        let regions = size[0] as usize;
        Ok(MemoryQueue {
            patterns: patterns.detach().copy(),
            pointers: vec![0; regions],
            fills: vec![size[1] as usize; regions],
            access_log: Mutex::new(None),
        })
    }

    /// Restores a saved state; `pointers` and `fills` are per region.
    pub fn from_state(patterns: &Tensor, pointers: Vec<usize>, fills: Vec<usize>) -> Result<Self> {
        let mut q = Self::from_patterns(patterns)?;
        let (regions, capacity) = (q.regions(), q.capacity());
        if pointers.len() != regions || fills.len() != regions {
            return Err(SquidError::Checkpoint(format!("queue state has {} pointers for {regions} regions", pointers.len())));
        }
        if pointers.iter().any(|&p| p >= capacity) || fills.iter().any(|&f| f > capacity) {
            return Err(SquidError::Checkpoint("queue pointer or fill count out of range".into()));
        }
        q.pointers = pointers;
        q.fills = fills;
        Ok(q)
    }

    pub fn regions(&self) -> usize {
        self.pointers.len()
    }

    pub fn capacity(&self) -> usize {
        self.patterns.size()[1] as usize
    }

    pub fn dim(&self) -> usize {
        self.patterns.size()[2] as usize
    }

    pub fn pointer(&self, region: usize) -> usize {
        self.pointers[region]
    }

    pub fn pointers(&self) -> &[usize] {
        &self.pointers
    }

    pub fn fill(&self, region: usize) -> usize {
        self.fills[region]
    }

    pub fn fills(&self) -> &[usize] {
        &self.fills
    }

    /// All stored patterns, `[regions, capacity, dim]`.
    pub fn patterns(&self) -> &Tensor {
        &self.patterns
    }

    /// Stored patterns of one region, `[capacity, dim]`.
    pub fn region(&self, region: usize) -> Tensor {
        self.patterns.get(region as i64)
    }

    /// Starts recording every region access.
    pub fn enable_access_log(&self) {
        *self.access_log.lock().unwrap() = Some(Vec::new());
    }

    /// Returns and clears the recorded accesses.
    pub fn take_access_log(&self) -> Vec<QueueAccess> {
        self.access_log.lock().unwrap().as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn record(&self, patch: Option<usize>, region: usize, kind: AccessKind) {
        if let Some(log) = self.access_log.lock().unwrap().as_mut() {
            log.push(QueueAccess { patch, region, kind });
        }
    }

    fn check_region(&self, region: usize) -> Result<()> {
        if region >= self.regions() {
            return Err(SquidError::InvalidArgument(format!("region {region} out of range for {} regions", self.regions())));
        }
        Ok(())
    }

    fn check_features(&self, f: &Tensor) -> Result<()> {
        let size = f.size();
        if size.len() != 2 || size[1] as usize != self.dim() {
            return Err(SquidError::shape(format!("[batch, {}]", self.dim()), format!("{size:?}")));
        }
        Ok(())
    }

    /// Assembles the most similar patterns of one region for each row of `f` (`[batch, dim]`).
    ///
    /// Gradient reaches `f` through the similarity weights; stored patterns are constants.
    pub fn query_assemble(&self, region: usize, f: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
        self.check_region(region)?;
        self.check_features(f)?;
        self.record(None, region, AccessKind::Query);
        let patterns = self.region(region).to_kind(f.kind()).unsqueeze(0);
        Ok(assemble(&f.unsqueeze(0), &patterns, k, shrinkage)?.squeeze_dim(0))
    }

    /// Queries every patch of a batch against its own region.
    ///
    /// `f` is `[batch * patches, dim]` with patches in raster order inside each image.
    pub fn query_grid(&self, map: &RegionMap, f: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
        self.check_features(f)?;
        if map.n_regions() != self.regions() {
            return Err(SquidError::InvalidArgument(format!(
                "region map has {} regions, queue has {}",
                map.n_regions(),
                self.regions()
            )));
        }
        let p = map.n_patches() as i64;
        let rows = f.size()[0];
        if rows % p != 0 {
            return Err(SquidError::shape(format!("a multiple of {p} rows"), rows));
        }
        for patch in 0..map.n_patches() {
            self.record(Some(patch), map.region_of_patch(patch), AccessKind::Query);
        }
        let d = self.dim() as i64;
        let per_patch = f.view([rows / p, p, d]).transpose(0, 1);
        let index = Tensor::from_slice(&map.as_slice().iter().map(|&r| r as i64).collect::<Vec<_>>()).to_device(f.device());
        let patterns = self.patterns.index_select(0, &index).to_kind(f.kind());
        let out = assemble(&per_patch, &patterns, k, shrinkage)?;
        Ok(out.transpose(0, 1).contiguous().view([rows, d]))
    }

    /// Copies `f_batch` (`[batch, dim]`) into consecutive slots of `region`, wrapping at capacity.
    pub fn update(&mut self, region: usize, f_batch: &Tensor, mode: Mode) -> Result<()> {
        if mode != Mode::Train {
            return Err(SquidError::QueueUpdateInInference);
        }
        self.check_region(region)?;
        self.check_features(f_batch)?;
        self.record(None, region, AccessKind::Update);
        self.write(region, f_batch);
        Ok(())
    }

    /// Writes every patch feature of a batch into its own region.
    ///
    /// Within a region, rows are inserted in batch order (image-major, then raster order).
    pub fn update_grid(&mut self, map: &RegionMap, f: &Tensor, mode: Mode) -> Result<()> {
        if mode != Mode::Train {
            return Err(SquidError::QueueUpdateInInference);
        }
        self.check_features(f)?;
        let p = map.n_patches();
        let rows = f.size()[0] as usize;
        if rows % p != 0 {
            return Err(SquidError::shape(format!("a multiple of {p} rows"), rows));
        }
        for region in 0..self.regions() {
            let patches = map.patches_of(region);
            if patches.is_empty() {
                continue;
            }
            for &patch in &patches {
                self.record(Some(patch), region, AccessKind::Update);
            }
            let index: Vec<i64> = (0..rows / p).flat_map(|b| patches.iter().map(move |&q| (b * p + q) as i64)).collect();
            let index = Tensor::from_slice(&index).to_device(f.device());
            self.write(region, &f.index_select(0, &index));
        }
        Ok(())
    }

    fn write(&mut self, region: usize, f: &Tensor) {
        let n = f.size()[0] as usize;
        if n == 0 {
            return;
        }
        let capacity = self.capacity();
        let start = self.pointers[region];
        // Only the newest `capacity` rows survive a wrap-around.
        let skip = n.saturating_sub(capacity);
        let slots: Vec<i64> = (skip..n).map(|i| ((start + i) % capacity) as i64).collect();
        let slots = Tensor::from_slice(&slots).to_device(self.patterns.device());
        let rows = f.narrow(0, skip as i64, (n - skip) as i64).detach().to_kind(self.patterns.kind());
        tch::no_grad(|| {
            let _ = self.patterns.get(region as i64).index_copy_(0, &slots, &rows);
        });
        self.pointers[region] = (start + n) % capacity;
        self.fills[region] = (self.fills[region] + n).min(capacity);
    }
}

impl Clone for MemoryQueue {
    fn clone(&self) -> Self {
        MemoryQueue {
            patterns: self.patterns.copy(),
            pointers: self.pointers.clone(),
            fills: self.fills.clone(),
            access_log: Mutex::new(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::partition_regions;

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        let t = t.to_kind(Kind::Float);
        (0..t.size()[0]).map(|i| Vec::<f32>::try_from(t.get(i)).unwrap()).collect()
    }

    fn vector(v: f32) -> Tensor {
        Tensor::from_slice(&[v, -v]).view([1, 2])
    }

    #[test]
    fn circular_overwrite_keeps_newest() {
        let mut q = MemoryQueue::new(1, 3, 2, Device::Cpu).unwrap();
        for v in 1..=5 {
            q.update(0, &vector(v as f32), Mode::Train).unwrap();
        }
        // a..e = 1..5 land in [d, e, c]
        assert_eq!(rows(&q.region(0)), vec![vec![4.0, -4.0], vec![5.0, -5.0], vec![3.0, -3.0]]);
        assert_eq!(q.pointer(0), 2);
        assert_eq!(q.fill(0), 3);
    }

    #[test]
    fn oversized_batch_keeps_last_capacity_rows() {
        let mut q = MemoryQueue::new(1, 3, 2, Device::Cpu).unwrap();
        let batch = Tensor::cat(&(1..=5).map(|v| vector(v as f32)).collect::<Vec<_>>(), 0);
        q.update(0, &batch, Mode::Train).unwrap();
        assert_eq!(rows(&q.region(0)), vec![vec![4.0, -4.0], vec![5.0, -5.0], vec![3.0, -3.0]]);
        assert_eq!(q.pointer(0), 2);
    }

    #[test]
    fn update_rejected_in_inference() {
        let mut q = MemoryQueue::new(1, 3, 2, Device::Cpu).unwrap();
        assert!(matches!(q.update(0, &vector(1.0), Mode::Infer), Err(SquidError::QueueUpdateInInference)));
        assert_eq!(q.fill(0), 0);
    }

    #[test]
    fn exact_match_top1_returns_feature() {
        let f = Tensor::from_slice(&[0.25f32, -1.5, 3.0]).view([1, 3]);
        let q = MemoryQueue::from_patterns(&f.unsqueeze(0)).unwrap();
        let out = q.query_assemble(0, &f, 1, Shrinkage::Gumbel).unwrap();
        assert_eq!(rows(&out), rows(&f));
    }

    #[test]
    fn identical_patterns_assemble_to_that_pattern() {
        let p = Tensor::from_slice(&[1.0f32, 2.0, 1.0, 2.0]).view([1, 2, 2]);
        let q = MemoryQueue::from_patterns(&p).unwrap();
        let f = Tensor::from_slice(&[0.3f32, -0.7]).view([1, 2]);
        let out = rows(&q.query_assemble(0, &f, 2, Shrinkage::Gumbel).unwrap());
        assert!((out[0][0] - 1.0).abs() < 1e-6 && (out[0][1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = MemoryQueue::new(2, 4, 3, Device::Cpu).unwrap();
        let f = Tensor::zeros([2, 5], (Kind::Float, Device::Cpu));
        assert!(matches!(q.query_assemble(0, &f, 1, Shrinkage::Gumbel), Err(SquidError::Shape { .. })));
    }

    #[test]
    fn stored_patterns_never_require_grad() {
        let mut q = MemoryQueue::new(1, 4, 3, Device::Cpu).unwrap();
        let f = Tensor::randn([2, 3], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        q.update(0, &(&f * 2.0), Mode::Train).unwrap();
        assert!(!q.patterns().requires_grad());
        let out = q.query_assemble(0, &f, 2, Shrinkage::Gumbel).unwrap();
        out.sum(Kind::Float).backward();
        assert!(f.grad().defined());
        assert!(!q.patterns().grad().defined());
    }

    #[test]
    fn grid_update_routes_each_patch_to_its_region() {
        let map = partition_regions(2, 2).unwrap();
        let mut q = MemoryQueue::new(4, 5, 1, Device::Cpu).unwrap();
        // two images, four patches each; value = 10 * image + patch
        let f = Tensor::from_slice(&[0.0f32, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).view([8, 1]);
        q.update_grid(&map, &f, Mode::Train).unwrap();
        for region in 0..4 {
            let stored = rows(&q.region(region));
            assert_eq!(stored[0][0], region as f32);
            assert_eq!(stored[1][0], 10.0 + region as f32);
            assert_eq!(q.fill(region), 2);
        }
    }

    #[test]
    fn grid_query_matches_per_region_query() {
        let map = partition_regions(2, 2).unwrap();
        let q = MemoryQueue::from_patterns(&Tensor::randn([4, 6, 5], (Kind::Float, Device::Cpu))).unwrap();
        let f = Tensor::randn([8, 5], (Kind::Float, Device::Cpu));
        let grid = q.query_grid(&map, &f, 3, Shrinkage::Gumbel).unwrap();
        for row in 0..8i64 {
            let one = q.query_assemble((row % 4) as usize, &f.narrow(0, row, 1), 3, Shrinkage::Gumbel).unwrap();
            let diff = (grid.narrow(0, row, 1) - one).abs().max().double_value(&[]);
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn access_log_records_patch_and_region() {
        let map = partition_regions(2, 2).unwrap();
        let mut q = MemoryQueue::new(4, 5, 3, Device::Cpu).unwrap();
        q.enable_access_log();
        let f = Tensor::randn([4, 3], (Kind::Float, Device::Cpu));
        let _ = q.query_grid(&map, &f, 2, Shrinkage::Gumbel).unwrap();
        q.update_grid(&map, &f, Mode::Train).unwrap();
        let log = q.take_access_log();
        assert_eq!(log.len(), 8);
        assert!(log.iter().all(|a| a.patch == Some(a.region)));
    }
}
