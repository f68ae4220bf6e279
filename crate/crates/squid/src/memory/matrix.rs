use tch::{nn, Tensor};

use super::{assemble, RegionMap, Shrinkage};
use crate::error::{Result, SquidError};

/// Learnable pattern bank, optionally split into per-patch regions.
///
/// Patterns are trainable variables of the owning var store and receive
/// gradient through both the similarity weights and the assembly.
#[derive(Debug)]
pub struct MemoryMatrix {
    patterns: Tensor,
}

impl MemoryMatrix {
    /// A single global bank of `slots` patterns of dimension `dim`.
    pub fn new(path: nn::Path, slots: i64, dim: i64) -> Self {
        Self::with_regions(path, 1, slots, dim)
    }

    pub fn with_regions(path: nn::Path, regions: i64, slots: i64, dim: i64) -> Self {
        let patterns = path.var("patterns", &[regions, slots, dim], nn::Init::Randn { mean: 0.0, stdev: 1.0 });
        MemoryMatrix { patterns }
    }

    pub fn regions(&self) -> usize {
        self.patterns.size()[0] as usize
    }

    pub fn slots(&self) -> usize {
        self.patterns.size()[1] as usize
    }

    pub fn dim(&self) -> usize {
        self.patterns.size()[2] as usize
    }

    /// `[regions, slots, dim]`.
    pub fn patterns(&self) -> &Tensor {
        &self.patterns
    }

    fn check(&self, f: &Tensor) -> Result<()> {
        let size = f.size();
        if size.len() != 2 || size[1] as usize != self.dim() {
            return Err(SquidError::shape(format!("[n, {}]", self.dim()), format!("{size:?}")));
        }
        Ok(())
    }

    /// Assembles patterns of the first (global) region for each row of `f` (`[n, dim]`).
    pub fn read(&self, f: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
        self.check(f)?;
        Ok(assemble(&f.unsqueeze(0), &self.patterns.narrow(0, 0, 1), k, shrinkage)?.squeeze_dim(0))
    }

    /// Reads every spatial location of a `[b, c, h, w]` feature map, with `c == dim`.
    pub fn read_map(&self, x: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
        let size = x.size();
        if size.len() != 4 || size[1] as usize != self.dim() {
            return Err(SquidError::shape(format!("[b, {}, h, w]", self.dim()), format!("{size:?}")));
        }
        let (b, c, h, w) = (size[0], size[1], size[2], size[3]);
        let flat = x.permute([0, 2, 3, 1]).reshape([b * h * w, c]);
        let out = self.read(&flat, k, shrinkage)?;
        Ok(out.view([b, h, w, c]).permute([0, 3, 1, 2]).contiguous())
    }

    /// Per-region read for a patch batch, `f` is `[batch * patches, dim]`.
    pub fn read_grid(&self, map: &RegionMap, f: &Tensor, k: i64, shrinkage: Shrinkage) -> Result<Tensor> {
        self.check(f)?;
        if map.n_regions() != self.regions() {
            return Err(SquidError::InvalidArgument(format!(
                "region map has {} regions, matrix has {}",
                map.n_regions(),
                self.regions()
            )));
        }
        let p = map.n_patches() as i64;
        let (rows, d) = (f.size()[0], self.dim() as i64);
        if rows % p != 0 {
            return Err(SquidError::shape(format!("a multiple of {p} rows"), rows));
        }
        let index = Tensor::from_slice(&map.as_slice().iter().map(|&r| r as i64).collect::<Vec<_>>()).to_device(f.device());
        let patterns = self.patterns.index_select(0, &index);
        let out = assemble(&f.view([rows / p, p, d]).transpose(0, 1), &patterns, k, shrinkage)?;
        Ok(out.transpose(0, 1).contiguous().view([rows, d]))
    }
}
