//! Feature-level in-painting.
//!
//! Each patch feature is reduced by a point-wise convolution, matched against
//! its own memory region to assemble a "normal" counterpart, refined by
//! attending to the assembled normals of its eight neighbours, expanded back,
//! and finally gated against the raw feature by the masked shortcut.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Kind, Tensor};

use crate::error::{Result, SquidError};
use crate::memory::{MemoryMatrix, MemoryQueue, RegionMap, Shrinkage};
use crate::networks::{divide_patches, reverse_patches, ConvBlock};
use crate::Mode;

/// Refinement layer applied between memory query and expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Refine {
    #[default]
    Transformer,
    Conv,
}

/// How in-painted and raw features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShortcutKind {
    /// Bernoulli(rho) gate per location while training, in-painted only at inference.
    #[default]
    Hard,
    /// Fixed `(1 - rho) * F + rho * inpaint(F)` in both modes.
    Soft,
    /// Plain residual `F + inpaint(F)`.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    /// When false the block is an identity and the memory is never touched.
    pub enabled: bool,
    /// Shortcut gating probability.
    pub rho: f64,
    pub refine: Refine,
    pub shortcut: ShortcutKind,
    pub heads: i64,
    /// MLP hidden width as a multiple of the token width.
    pub mlp_ratio: i64,
    /// Channel reduction factor of the bottleneck convolutions.
    pub reduction: i64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig { enabled: true, rho: 0.95, refine: Refine::Transformer, shortcut: ShortcutKind::Hard, heads: 4, mlp_ratio: 2, reduction: 2 }
    }
}

/// Gate settings for [`masked_shortcut`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedShortcutConfig {
    pub rho: f64,
    pub mode: Mode,
}

/// Per-location Bernoulli(rho) mask of the given shape, as 0/1 floats.
pub fn shortcut_mask(shape: &[i64], rho: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(SquidError::InvalidArgument(format!("gate probability {rho} outside [0, 1]")));
    }
    let n: i64 = shape.iter().product();
    let bits: Vec<f32> = (0..n).map(|_| if rng.gen_bool(rho) { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_slice(&bits).view(shape))
}

/// `F' = (1 - d) * F + d * F_inpaint` with `d ~ Bernoulli(rho)` per sample and spatial
/// location while training; `F' = F_inpaint` at inference.
pub fn masked_shortcut(f: &Tensor, f_inpaint: &Tensor, cfg: &MaskedShortcutConfig, rng: &mut impl Rng) -> Result<Tensor> {
    if f.size() != f_inpaint.size() {
        return Err(SquidError::shape(format!("{:?}", f.size()), format!("{:?}", f_inpaint.size())));
    }
    if !(0.0..=1.0).contains(&cfg.rho) {
        return Err(SquidError::InvalidArgument(format!("gate probability {} outside [0, 1]", cfg.rho)));
    }
    match cfg.mode {
        Mode::Infer => Ok(f_inpaint.shallow_clone()),
        Mode::Train => {
            let size = f.size();
            let mut shape = size.clone();
            if shape.len() >= 2 {
                shape[1] = 1;
            }
            let mask = shortcut_mask(&shape, cfg.rho, rng)?.to_device(f.device()).to_kind(Kind::Bool);
            Ok(f_inpaint.where_self(&mask, f))
        }
    }
}

/// Neighbour offsets in raster order, centre excluded.
const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// The eight assembled normals around every patch, zero outside the grid.
///
/// `normals` is `[b * rows * cols, d]`; the result is `[b * rows * cols, 8, d]`.
pub fn gather_all_neighbors(normals: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let size = normals.size();
    let p = (rows * cols) as i64;
    if size.len() != 2 || p == 0 || size[0] % p != 0 {
        return Err(SquidError::shape(format!("[b * {rows} * {cols}, d]"), format!("{size:?}")));
    }
    let (r, c, d) = (rows as i64, cols as i64, size[1]);
    let b = size[0] / p;
    let grid = normals.view([b, r, c, d]).permute([0, 3, 1, 2]);
    let padded = grid.constant_pad_nd([1, 1, 1, 1]);
    let shifted: Vec<Tensor> = NEIGHBOURS.iter().map(|&(di, dj)| padded.narrow(2, 1 + di, r).narrow(3, 1 + dj, c)).collect();
    Ok(Tensor::stack(&shifted, 2).permute([0, 3, 4, 2, 1]).reshape([b * p, 8, d]))
}

/// The eight neighbour tokens of patch `(i, j)` for every image: `[b, 8, d]`.
pub fn gather_neighbor_conditions(normals: &Tensor, rows: usize, cols: usize, at: (usize, usize)) -> Result<Tensor> {
    if at.0 >= rows || at.1 >= cols {
        return Err(SquidError::InvalidArgument(format!("patch {at:?} outside a {rows}x{cols} grid")));
    }
    let all = gather_all_neighbors(normals, rows, cols)?;
    let p = (rows * cols) as i64;
    let b = all.size()[0] / p;
    Ok(all.view([b, p, 8, -1]).select(1, (at.0 * cols + at.1) as i64))
}

/// Pair of point-wise convolutions around the in-painting step.
#[derive(Debug)]
pub struct Bottleneck {
    reduce: nn::Conv2D,
    expand: nn::Conv2D,
    channels: i64,
    reduced: i64,
}

impl Bottleneck {
    pub fn new(p: nn::Path, channels: i64, reduction: i64) -> Result<Self> {
        if reduction <= 0 || channels % reduction != 0 {
            return Err(SquidError::Config(format!("cannot reduce {channels} channels by {reduction}")));
        }
        let reduced = channels / reduction;
        Ok(Bottleneck {
            reduce: nn::conv2d(&p / "reduce", channels, reduced, 1, Default::default()),
            expand: nn::conv2d(&p / "expand", reduced, channels, 1, Default::default()),
            channels,
            reduced,
        })
    }

    fn check(x: &Tensor, c: i64) -> Result<()> {
        let size = x.size();
        if size.len() != 4 || size[1] != c {
            return Err(SquidError::shape(format!("[n, {c}, h, w]"), format!("{size:?}")));
        }
        Ok(())
    }

    pub fn reduce(&self, x: &Tensor) -> Result<Tensor> {
        Self::check(x, self.channels)?;
        Ok(self.reduce.forward(x))
    }

    pub fn expand(&self, x: &Tensor) -> Result<Tensor> {
        Self::check(x, self.reduced)?;
        Ok(self.expand.forward(x))
    }

    pub fn reduced_channels(&self) -> i64 {
        self.reduced
    }
}

/// One pre-norm transformer layer: a single query token attends to the
/// neighbour tokens, then an MLP; both with residuals onto the query.
#[derive(Debug)]
pub struct AttentionRefiner {
    norm_q: nn::LayerNorm,
    norm_kv: nn::LayerNorm,
    query: nn::Linear,
    key: nn::Linear,
    value: nn::Linear,
    proj: nn::Linear,
    norm_mlp: nn::LayerNorm,
    fc1: nn::Linear,
    fc2: nn::Linear,
    heads: i64,
    dim: i64,
}

impl AttentionRefiner {
    pub fn new(p: nn::Path, dim: i64, heads: i64, mlp_ratio: i64) -> Result<Self> {
        if heads <= 0 || dim % heads != 0 {
            return Err(SquidError::Config(format!("token width {dim} is not divisible into {heads} heads")));
        }
        let ln = |name: &str| nn::layer_norm(&p / name, vec![dim], Default::default());
        let lin = |name: &str, i, o| nn::linear(&p / name, i, o, Default::default());
        Ok(AttentionRefiner {
            norm_q: ln("norm_q"),
            norm_kv: ln("norm_kv"),
            query: lin("query", dim, dim),
            key: lin("key", dim, dim),
            value: lin("value", dim, dim),
            proj: lin("proj", dim, dim),
            norm_mlp: ln("norm_mlp"),
            fc1: lin("fc1", dim, dim * mlp_ratio),
            fc2: lin("fc2", dim * mlp_ratio, dim),
            heads,
            dim,
        })
    }

    /// `query` is `[n, d]`, `tokens` is `[n, t, d]`; returns `[n, d]`.
    pub fn forward(&self, query: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (qs, ts) = (query.size(), tokens.size());
        if qs.len() != 2 || ts.len() != 3 || qs[1] != self.dim || ts[2] != self.dim || qs[0] != ts[0] {
            return Err(SquidError::shape(format!("[n, {0}] query with [n, t, {0}] tokens", self.dim), format!("{qs:?} / {ts:?}")));
        }
        let (n, t, h) = (qs[0], ts[1], self.heads);
        let dh = self.dim / h;
        let q = self.norm_q.forward(query).apply(&self.query).view([n, h, 1, dh]);
        let kv = self.norm_kv.forward(tokens);
        let k = kv.apply(&self.key).view([n, t, h, dh]).transpose(1, 2);
        let v = kv.apply(&self.value).view([n, t, h, dh]).transpose(1, 2);
        let attn = (q.matmul(&k.transpose(-1, -2)) / (dh as f64).sqrt()).softmax(-1, q.kind());
        let heads = attn.matmul(&v).view([n, self.dim]);
        let x = query + heads.apply(&self.proj);
        let mlp = self.norm_mlp.forward(&x).apply(&self.fc1).gelu("none").apply(&self.fc2);
        Ok(x + mlp)
    }
}

/// Convolutional replacement for the attention refiner: a 3x3 conv over the
/// whole-image grid of reduced features concatenated with assembled normals.
#[derive(Debug)]
pub struct ConvRefiner {
    block: ConvBlock,
}

impl ConvRefiner {
    pub fn new(p: nn::Path, channels: i64) -> Self {
        ConvRefiner { block: ConvBlock::new(p, 2 * channels, channels, 3, 1, 1) }
    }

    /// Both inputs are `[b * rows * cols, c, h, w]` patch batches.
    pub fn forward(&self, f: &Tensor, normals: &Tensor, rows: usize, cols: usize, train: bool) -> Result<Tensor> {
        let x = Tensor::cat(&[reverse_patches(f, rows, cols)?, reverse_patches(normals, rows, cols)?], 1);
        Ok(f + divide_patches(&self.block.forward(&x, train), rows, cols)?)
    }
}

#[derive(Debug)]
pub enum Refiner {
    Attention(AttentionRefiner),
    Conv(ConvRefiner),
}

/// The memory an in-painting block queries.
#[derive(Debug)]
pub enum PatchMemory {
    /// Gradient-free queue, written during training.
    Queue(MemoryQueue),
    /// Learnable per-region bank.
    Matrix(MemoryMatrix),
}

impl PatchMemory {
    pub fn as_queue(&self) -> Option<&MemoryQueue> {
        match self {
            PatchMemory::Queue(q) => Some(q),
            PatchMemory::Matrix(_) => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PatchMemory::Queue(q) => q.dim(),
            PatchMemory::Matrix(m) => m.dim(),
        }
    }
}

/// Per-call options of [`InpaintBlock::forward`].
#[derive(Debug, Clone, Copy)]
pub struct InpaintStep {
    pub mode: Mode,
    /// Whether this pass copies features into the queue (training only).
    pub update_memory: bool,
    pub top_k: i64,
    pub shrinkage: Shrinkage,
}

#[derive(Debug)]
pub struct InpaintBlock {
    bottleneck: Bottleneck,
    refiner: Refiner,
    cfg: InpaintConfig,
    grid: [usize; 2],
    feature_shape: (i64, i64, i64),
}

impl InpaintBlock {
    /// `feature_shape` is `(channels, height, width)` of one patch feature.
    pub fn new(p: nn::Path, cfg: &InpaintConfig, grid: [usize; 2], feature_shape: (i64, i64, i64)) -> Result<Self> {
        let bottleneck = Bottleneck::new(&p / "bottleneck", feature_shape.0, cfg.reduction)?;
        let rc = bottleneck.reduced_channels();
        let refiner = match cfg.refine {
            Refine::Transformer => Refiner::Attention(AttentionRefiner::new(&p / "attention", rc * feature_shape.1 * feature_shape.2, cfg.heads, cfg.mlp_ratio)?),
            Refine::Conv => Refiner::Conv(ConvRefiner::new(&p / "conv", rc)),
        };
        Ok(InpaintBlock { bottleneck, refiner, cfg: cfg.clone(), grid, feature_shape })
    }

    /// Width of one flattened reduced patch feature, i.e. of one memory pattern.
    pub fn token_dim(&self) -> i64 {
        self.bottleneck.reduced_channels() * self.feature_shape.1 * self.feature_shape.2
    }

    pub fn config(&self) -> &InpaintConfig {
        &self.cfg
    }

    pub fn refiner(&self) -> &Refiner {
        &self.refiner
    }

    /// In-paints a `[b * patches, c, h, w]` patch batch.
    pub fn forward(&self, f: &Tensor, memory: &mut PatchMemory, regions: &RegionMap, step: InpaintStep, rng: &mut impl Rng) -> Result<Tensor> {
        let size = f.size();
        let (c, h, w) = self.feature_shape;
        let [rows, cols] = self.grid;
        if size.len() != 4 || (size[1], size[2], size[3]) != (c, h, w) || size[0] % (rows * cols) as i64 != 0 {
            return Err(SquidError::shape(format!("[b * {}, {c}, {h}, {w}]", rows * cols), format!("{size:?}")));
        }
        if regions.rows() != rows || regions.cols() != cols {
            return Err(SquidError::InvalidArgument("region map does not match the patch grid".into()));
        }
        if !self.cfg.enabled {
            return Ok(f.shallow_clone());
        }
        let n = size[0];
        let reduced = self.bottleneck.reduce(f)?;
        let tokens = reduced.view([n, self.token_dim()]);
        let normals = match memory {
            PatchMemory::Queue(q) => q.query_grid(regions, &tokens, step.top_k, step.shrinkage)?,
            PatchMemory::Matrix(m) => m.read_grid(regions, &tokens, step.top_k, step.shrinkage)?,
        };
        if step.update_memory {
            if let PatchMemory::Queue(q) = memory {
                q.update_grid(regions, &tokens, step.mode)?;
            }
        }
        let refined = match &self.refiner {
            Refiner::Attention(a) => a.forward(&tokens, &gather_all_neighbors(&normals, rows, cols)?)?.view(reduced.size().as_slice()),
            Refiner::Conv(cr) => cr.forward(&reduced, &normals.view(reduced.size().as_slice()), rows, cols, step.mode == Mode::Train)?,
        };
        let inpainted = self.bottleneck.expand(&refined)?;
        match self.cfg.shortcut {
            ShortcutKind::Hard => masked_shortcut(f, &inpainted, &MaskedShortcutConfig { rho: self.cfg.rho, mode: step.mode }, rng),
            ShortcutKind::Soft => Ok(f * (1.0 - self.cfg.rho) + inpainted * self.cfg.rho),
            ShortcutKind::Residual => Ok(f + inpainted),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tch::Device;

    use super::*;
    use crate::memory::partition_regions;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn zero_tokens(t: &Tensor) -> i64 {
        t.abs().sum_dim_intlist([-1i64].as_slice(), false, Kind::Float).eq(0.0).sum(Kind::Int64).int64_value(&[])
    }

    #[test]
    fn corner_of_two_by_two_has_three_real_neighbours() {
        let normals = Tensor::ones([4, 6], (Kind::Float, Device::Cpu));
        let n = gather_neighbor_conditions(&normals, 2, 2, (0, 0)).unwrap();
        assert_eq!(n.size(), vec![1, 8, 6]);
        assert_eq!(zero_tokens(&n), 5);
    }

    #[test]
    fn interior_of_three_by_three_has_eight_real_neighbours() {
        let normals = Tensor::ones([9, 6], (Kind::Float, Device::Cpu));
        assert_eq!(zero_tokens(&gather_neighbor_conditions(&normals, 3, 3, (1, 1)).unwrap()), 0);
    }

    #[test]
    fn single_patch_grid_has_only_padding() {
        let normals = Tensor::ones([2, 6], (Kind::Float, Device::Cpu));
        assert_eq!(zero_tokens(&gather_all_neighbors(&normals, 1, 1).unwrap()), 16);
    }

    #[test]
    fn neighbours_come_in_raster_order() {
        // patch value = its raster index + 1
        let normals = Tensor::arange_start(1, 10, (Kind::Float, Device::Cpu)).view([9, 1]);
        let n = Vec::<f32>::try_from(gather_neighbor_conditions(&normals, 3, 3, (1, 1)).unwrap().flatten(0, -1)).unwrap();
        assert_eq!(n, vec![1.0, 2.0, 3.0, 4.0, 6.0, 7.0, 8.0, 9.0]);
        let n = Vec::<f32>::try_from(gather_neighbor_conditions(&normals, 3, 3, (0, 2)).unwrap().flatten(0, -1)).unwrap();
        assert_eq!(n, vec![0.0, 0.0, 0.0, 2.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn bottleneck_halves_channels_and_keeps_space() {
        let vs = nn::VarStore::new(Device::Cpu);
        let b = Bottleneck::new(vs.root(), 256, 2).unwrap();
        let x = Tensor::randn([4, 256, 4, 4], (Kind::Float, Device::Cpu));
        let r = b.reduce(&x).unwrap();
        assert_eq!(r.size(), vec![4, 128, 4, 4]);
        assert_eq!(b.expand(&r).unwrap().size(), x.size());
        assert!(b.reduce(&r).is_err());
    }

    #[test]
    fn zero_weights_make_refiner_an_identity() {
        let vs = nn::VarStore::new(Device::Cpu);
        let a = AttentionRefiner::new(vs.root(), 16, 4, 2).unwrap();
        tch::no_grad(|| {
            for (_, mut v) in vs.variables() {
                let _ = v.zero_();
            }
        });
        let q = Tensor::randn([5, 16], (Kind::Float, Device::Cpu));
        let kv = Tensor::randn([5, 8, 16], (Kind::Float, Device::Cpu));
        assert!(a.forward(&q, &kv).unwrap().equal(&q));
    }

    #[test]
    fn refiner_ignores_token_order() {
        let vs = nn::VarStore::new(Device::Cpu);
        let a = AttentionRefiner::new(vs.root(), 16, 4, 2).unwrap();
        let q = Tensor::randn([3, 16], (Kind::Double, Device::Cpu));
        let kv = Tensor::randn([3, 8, 16], (Kind::Double, Device::Cpu));
        let mut vs = vs;
        vs.double();
        let perm = Tensor::from_slice(&[5i64, 2, 7, 0, 1, 6, 3, 4]);
        let out = a.forward(&q, &kv).unwrap();
        let permuted = a.forward(&q, &kv.index_select(1, &perm)).unwrap();
        assert!((out - permuted).abs().max().double_value(&[]) < 1e-12);
    }

    #[test]
    fn refiner_rejects_mismatched_tokens() {
        let vs = nn::VarStore::new(Device::Cpu);
        let a = AttentionRefiner::new(vs.root(), 16, 4, 2).unwrap();
        let q = Tensor::randn([3, 16], (Kind::Float, Device::Cpu));
        assert!(a.forward(&q, &Tensor::randn([3, 8, 12], (Kind::Float, Device::Cpu))).is_err());
    }

    #[test]
    fn shortcut_infer_returns_inpainted_exactly() {
        let f = Tensor::randn([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        let g = Tensor::randn([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        let out = masked_shortcut(&f, &g, &MaskedShortcutConfig { rho: 0.3, mode: Mode::Infer }, &mut rng()).unwrap();
        assert!(out.equal(&g));
    }

    #[test]
    fn shortcut_with_zero_rho_returns_input_exactly() {
        let f = Tensor::randn([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        let g = Tensor::randn([2, 3, 4, 4], (Kind::Float, Device::Cpu));
        let out = masked_shortcut(&f, &g, &MaskedShortcutConfig { rho: 0.0, mode: Mode::Train }, &mut rng()).unwrap();
        assert!(out.equal(&f));
    }

    #[test]
    fn shortcut_gate_is_shared_across_channels() {
        let f = Tensor::zeros([4, 5, 3, 3], (Kind::Float, Device::Cpu));
        let g = Tensor::ones([4, 5, 3, 3], (Kind::Float, Device::Cpu));
        let out = masked_shortcut(&f, &g, &MaskedShortcutConfig { rho: 0.5, mode: Mode::Train }, &mut rng()).unwrap();
        let per_channel = out.sum_dim_intlist([1i64].as_slice(), false, Kind::Float);
        let v = Vec::<f32>::try_from(per_channel.flatten(0, -1)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0 || x == 5.0));
    }

    #[test]
    fn shortcut_validates_arguments() {
        let f = Tensor::zeros([1, 2, 2, 2], (Kind::Float, Device::Cpu));
        let cfg = MaskedShortcutConfig { rho: 1.5, mode: Mode::Train };
        assert!(masked_shortcut(&f, &f, &cfg, &mut rng()).is_err());
        let g = Tensor::zeros([1, 2, 2, 3], (Kind::Float, Device::Cpu));
        assert!(masked_shortcut(&f, &g, &MaskedShortcutConfig { rho: 0.5, mode: Mode::Train }, &mut rng()).is_err());
    }

    fn block(cfg: &InpaintConfig) -> (nn::VarStore, InpaintBlock, PatchMemory, RegionMap) {
        let vs = nn::VarStore::new(Device::Cpu);
        let block = InpaintBlock::new(vs.root(), cfg, [2, 2], (16, 2, 2)).unwrap();
        let queue = MemoryQueue::new(4, 10, block.token_dim() as usize, Device::Cpu).unwrap();
        (vs, block, PatchMemory::Queue(queue), partition_regions(2, 2).unwrap())
    }

    fn step(mode: Mode) -> InpaintStep {
        InpaintStep { mode, update_memory: mode == Mode::Train, top_k: 3, shrinkage: Shrinkage::Gumbel }
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic_in_inference() {
        let (_vs, b, mut mem, map) = block(&InpaintConfig::default());
        let f = Tensor::randn([8, 16, 2, 2], (Kind::Float, Device::Cpu));
        let a = b.forward(&f, &mut mem, &map, step(Mode::Infer), &mut rng()).unwrap();
        let c = b.forward(&f, &mut mem, &map, step(Mode::Infer), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.size(), f.size());
        assert!(a.equal(&c));
        assert!(mem.as_queue().unwrap().fills().iter().all(|&n| n == 0));
    }

    #[test]
    fn training_pass_fills_every_region_once_per_image() {
        let (_vs, b, mut mem, map) = block(&InpaintConfig::default());
        let f = Tensor::randn([12, 16, 2, 2], (Kind::Float, Device::Cpu));
        let _ = b.forward(&f, &mut mem, &map, step(Mode::Train), &mut rng()).unwrap();
        assert_eq!(mem.as_queue().unwrap().fills(), &[3, 3, 3, 3]);
    }

    #[test]
    fn disabled_block_is_identity() {
        let cfg = InpaintConfig { enabled: false, ..Default::default() };
        let (_vs, b, mut mem, map) = block(&cfg);
        let f = Tensor::randn([4, 16, 2, 2], (Kind::Float, Device::Cpu));
        assert!(b.forward(&f, &mut mem, &map, step(Mode::Train), &mut rng()).unwrap().equal(&f));
        assert!(mem.as_queue().unwrap().fills().iter().all(|&n| n == 0));
    }

    #[test]
    fn conv_refiner_variant_runs() {
        let cfg = InpaintConfig { refine: Refine::Conv, shortcut: ShortcutKind::Soft, ..Default::default() };
        let (_vs, b, mut mem, map) = block(&cfg);
        let f = Tensor::randn([8, 16, 2, 2], (Kind::Float, Device::Cpu));
        assert_eq!(b.forward(&f, &mut mem, &map, step(Mode::Train), &mut rng()).unwrap().size(), f.size());
    }
}
