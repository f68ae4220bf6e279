use serde::{Deserialize, Serialize};

use crate::error::{Result, SquidError};

/// Assignment of patch-grid positions to memory regions.
///
/// Patches are indexed in raster order, `index = row * cols + col`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    rows: usize,
    cols: usize,
    regions: Vec<usize>,
    n_regions: usize,
}

/// One region per patch: patch `(i, j)` owns region `i * cols + j` and nothing else.
pub fn partition_regions(rows: usize, cols: usize) -> Result<RegionMap> {
    if rows == 0 || cols == 0 {
        return Err(SquidError::InvalidArgument(format!("patch grid must be at least 1x1, got {rows}x{cols}")));
    }
    let n = rows * cols;
    Ok(RegionMap { rows, cols, regions: (0..n).collect(), n_regions: n })
}

impl RegionMap {
    /// Every patch reads and writes the same single region.
    pub fn shared(rows: usize, cols: usize) -> Result<RegionMap> {
        let mut map = partition_regions(rows, cols)?;
        map.regions.iter_mut().for_each(|r| *r = 0);
        map.n_regions = 1;
        Ok(map)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_patches(&self) -> usize {
        self.regions.len()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn region_of(&self, row: usize, col: usize) -> usize {
        self.regions[row * self.cols + col]
    }

    pub fn region_of_patch(&self, patch: usize) -> usize {
        self.regions[patch]
    }

    /// Region index per patch, raster order.
    pub fn as_slice(&self) -> &[usize] {
        &self.regions
    }

    pub fn is_bijective(&self) -> bool {
        self.n_regions == self.regions.len()
    }

    /// Patches assigned to `region`, in raster order.
    pub fn patches_of(&self, region: usize) -> Vec<usize> {
        (0..self.regions.len()).filter(|&p| self.regions[p] == region).collect()
    }
}
