//! Encoder, teacher/student generators and discriminator.
//!
//! All convolutional parts are plain conv + batch-norm + ReLU stacks. The
//! encoder and generators work on non-overlapping patches; the generators merge
//! the patches back into whole images after their last memory level, and the
//! discriminator always sees whole images.

use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, nn::ModuleT, Tensor};

use crate::error::{Result, SquidError};
use crate::memory::{MemoryMatrix, Shrinkage};

/// Number of stride-2 encoder levels.
pub const ENCODER_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Side of the square input image.
    pub input_size: i64,
    /// Patch grid as `[rows, cols]`.
    pub patch_grid: [usize; 2],
    /// Output channels of encoder levels 1..=4; generators mirror them.
    pub encoder_channels: Vec<i64>,
    pub discriminator_channels: Vec<i64>,
    /// Decoder levels that merge encoder skips and read a memory matrix.
    pub memory_levels: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 128,
            patch_grid: [2, 2],
            encoder_channels: vec![32, 64, 128, 256],
            discriminator_channels: vec![16, 32, 64, 128, 128],
            memory_levels: vec![4, 3],
        }
    }
}

impl NetworkConfig {
    /// 96x96 input split into a 3x3 grid of 32x32 patches.
    pub fn digit_anatomy() -> Self {
        NetworkConfig { input_size: 96, patch_grid: [3, 3], ..Default::default() }
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid[0] * self.patch_grid[1]
    }

    /// Patch size as `(height, width)`.
    pub fn patch_size(&self) -> (i64, i64) {
        (self.input_size / self.patch_grid[0] as i64, self.input_size / self.patch_grid[1] as i64)
    }

    /// Spatial size of the deepest encoder features of one patch.
    pub fn bottleneck_size(&self) -> (i64, i64) {
        let (h, w) = self.patch_size();
        let f = 1 << ENCODER_LEVELS;
        (h / f, w / f)
    }

    pub fn bottleneck_channels(&self) -> i64 {
        self.encoder_channels[ENCODER_LEVELS - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SquidError::Config(m));
        if self.encoder_channels.len() != ENCODER_LEVELS || self.encoder_channels.iter().any(|&c| c <= 0) {
            return bad(format!("encoder_channels needs {ENCODER_LEVELS} positive entries, got {:?}", self.encoder_channels));
        }
        if self.discriminator_channels.is_empty() || self.discriminator_channels.iter().any(|&c| c <= 0) {
            return bad(format!("invalid discriminator_channels {:?}", self.discriminator_channels));
        }
        if self.patch_grid.iter().any(|&g| g == 0) {
            return bad(format!("patch grid must be at least 1x1, got {:?}", self.patch_grid));
        }
        let f = 1i64 << ENCODER_LEVELS;
        for &g in &self.patch_grid {
            if self.input_size <= 0 || self.input_size % g as i64 != 0 || (self.input_size / g as i64) % f != 0 {
                return bad(format!(
                    "input size {} must split into {:?} patches whose side is divisible by {f}",
                    self.input_size, self.patch_grid
                ));
            }
        }
        let d = 1i64 << self.discriminator_channels.len();
        if self.input_size % d != 0 {
            return bad(format!("input size {} is not divisible by the discriminator stride {d}", self.input_size));
        }
        if self.memory_levels.iter().any(|&l| l == 0 || l > ENCODER_LEVELS) {
            return bad(format!("memory levels must lie in 1..={ENCODER_LEVELS}, got {:?}", self.memory_levels));
        }
        Ok(())
    }
}

/// Splits `[b, c, h, w]` images into `[b * rows * cols, c, h / rows, w / cols]` patches, raster order.
pub fn divide_patches(images: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let size = images.size();
    if size.len() != 4 {
        return Err(SquidError::shape("[b, c, h, w]", format!("{size:?}")));
    }
    let (b, c, h, w) = (size[0], size[1], size[2], size[3]);
    let (r, q) = (rows as i64, cols as i64);
    if rows == 0 || cols == 0 || h % r != 0 || w % q != 0 {
        return Err(SquidError::shape(format!("sides divisible by {rows}x{cols}"), format!("{h}x{w}")));
    }
    let (ph, pw) = (h / r, w / q);
    Ok(images.reshape([b, c, r, ph, q, pw]).permute([0, 2, 4, 1, 3, 5]).reshape([b * r * q, c, ph, pw]))
}

/// Exact inverse of [`divide_patches`].
pub fn reverse_patches(patches: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let size = patches.size();
    let (r, q) = (rows as i64, cols as i64);
    if size.len() != 4 || rows == 0 || cols == 0 || size[0] % (r * q) != 0 {
        return Err(SquidError::shape(format!("[b * {rows} * {cols}, c, h, w]"), format!("{size:?}")));
    }
    let (n, c, ph, pw) = (size[0], size[1], size[2], size[3]);
    let b = n / (r * q);
    Ok(patches.reshape([b, r, q, c, ph, pw]).permute([0, 3, 1, 4, 2, 5]).reshape([b, c, r * ph, q * pw]))
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Debug)]
pub(crate) struct ConvBlock {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBlock {
    pub(crate) fn new(p: nn::Path, c_in: i64, c_out: i64, kernel: i64, stride: i64, padding: i64) -> Self {
        let cfg = nn::ConvConfig { stride, padding, bias: false, ..Default::default() };
        ConvBlock { conv: nn::conv2d(&p / "conv", c_in, c_out, kernel, cfg), bn: nn::batch_norm2d(&p / "bn", c_out, Default::default()) }
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        x.apply(&self.conv).apply_t(&self.bn, train).relu()
    }
}

/// Patch encoder: a stride-1 stem followed by four levels that each halve the resolution.
#[derive(Debug)]
pub struct Encoder {
    stem: ConvBlock,
    levels: Vec<(ConvBlock, ConvBlock)>,
    patch_size: (i64, i64),
}

impl Encoder {
    pub fn new(p: nn::Path, cfg: &NetworkConfig) -> Self {
        let ch = &cfg.encoder_channels;
        let stem = ConvBlock::new(&p / "stem", 1, ch[0], 3, 1, 1);
        let mut c_in = ch[0];
        let levels = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let lp = &p / format!("level{}", i + 1);
                let down = ConvBlock::new(&lp / "down", c_in, c, 3, 2, 1);
                let refine = ConvBlock::new(&lp / "refine", c, c, 3, 1, 1);
                c_in = c;
                (down, refine)
            })
            .collect();
        Encoder { stem, levels, patch_size: cfg.patch_size() }
    }

    /// Returns the deepest features and the output of every level (shallowest first).
    pub fn forward(&self, patches: &Tensor, train: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let size = patches.size();
        if size.len() != 4 || size[1] != 1 || (size[2], size[3]) != self.patch_size {
            return Err(SquidError::shape(format!("[n, 1, {}, {}]", self.patch_size.0, self.patch_size.1), format!("{size:?}")));
        }
        let mut x = self.stem.forward(patches, train);
        let mut skips = Vec::with_capacity(self.levels.len());
        for (down, refine) in &self.levels {
            x = refine.forward(&down.forward(&x, train), train);
            skips.push(x.shallow_clone());
        }
        Ok((x, skips))
    }
}

#[derive(Debug)]
struct DecoderLevel {
    level: usize,
    upsample: bool,
    conv: ConvBlock,
    /// Fuses the concatenated skip when the level has one, otherwise a plain refinement.
    second: ConvBlock,
    skip: bool,
    matrix: Option<MemoryMatrix>,
}

/// Decoder features at one level for the student and the teacher.
#[derive(Debug)]
pub struct LevelFeaturePair {
    pub level: usize,
    pub student: Tensor,
    pub teacher: Tensor,
}

/// Decoder shared by the student (with memory matrices) and the teacher (without).
#[derive(Debug)]
pub struct Generator {
    levels: Vec<DecoderLevel>,
    head: ConvBlock,
    out: nn::Conv2D,
    grid: [usize; 2],
    in_shape: (i64, i64, i64),
}

/// Memory matrix settings for a student generator.
#[derive(Debug, Clone, Copy)]
pub struct DecoderMemory {
    pub slots: i64,
}

impl Generator {
    /// Student generator: memory matrices at `cfg.memory_levels` when `memory` is set.
    pub fn student(p: nn::Path, cfg: &NetworkConfig, memory: Option<DecoderMemory>) -> Self {
        Self::build(p, cfg, memory)
    }

    /// Teacher generator: same topology, no memory matrices.
    pub fn teacher(p: nn::Path, cfg: &NetworkConfig) -> Self {
        Self::build(p, cfg, None)
    }

    fn build(p: nn::Path, cfg: &NetworkConfig, memory: Option<DecoderMemory>) -> Self {
        let ch = &cfg.encoder_channels;
        let levels = (1..=ENCODER_LEVELS)
            .rev()
            .map(|level| {
                let lp = &p / format!("level{level}");
                let c_out = ch[level - 1];
                let c_in = if level == ENCODER_LEVELS { ch[ENCODER_LEVELS - 1] } else { ch[level] };
                let skip = cfg.memory_levels.contains(&level);
                let conv = ConvBlock::new(&lp / "conv", c_in, c_out, 3, 1, 1);
                let second = if skip {
                    ConvBlock::new(&lp / "fuse", 2 * c_out, c_out, 3, 1, 1)
                } else {
                    ConvBlock::new(&lp / "refine", c_out, c_out, 3, 1, 1)
                };
                let matrix = match memory {
                    Some(m) if skip => Some(MemoryMatrix::new(&lp / "matrix", m.slots, c_out)),
                    _ => None,
                };
                DecoderLevel { level, upsample: level != ENCODER_LEVELS, conv, second, skip, matrix }
            })
            .collect();
        let c_head = (ch[0] / 2).max(1);
        let head = ConvBlock::new(&p / "head", ch[0], c_head, 3, 1, 1);
        let out = nn::conv2d(&p / "out", c_head, 1, 1, Default::default());
        let (bh, bw) = cfg.bottleneck_size();
        Generator { levels, head, out, grid: cfg.patch_grid, in_shape: (cfg.bottleneck_channels(), bh, bw) }
    }

    pub fn has_memory(&self) -> bool {
        self.levels.iter().any(|l| l.matrix.is_some())
    }

    pub fn matrices(&self) -> impl Iterator<Item = (usize, &MemoryMatrix)> {
        self.levels.iter().filter_map(|l| l.matrix.as_ref().map(|m| (l.level, m)))
    }

    /// Decodes patch features into whole images in `[0, 1]`.
    ///
    /// `features` is `[b * patches, c, h, w]`; `skips` are the encoder level outputs,
    /// shallowest first. Returns the reconstruction and the per-level features,
    /// deepest level first (after the memory read where one exists).
    pub fn forward(&self, features: &Tensor, skips: &[Tensor], train: bool, k: i64, shrinkage: Shrinkage) -> Result<(Tensor, Vec<Tensor>)> {
        let size = features.size();
        let (c, h, w) = self.in_shape;
        if size.len() != 4 || (size[1], size[2], size[3]) != (c, h, w) {
            return Err(SquidError::shape(format!("[n, {c}, {h}, {w}]"), format!("{size:?}")));
        }
        if skips.len() != ENCODER_LEVELS {
            return Err(SquidError::shape(format!("{ENCODER_LEVELS} skips"), skips.len()));
        }
        let [rows, cols] = self.grid;
        let mut x = features.shallow_clone();
        let mut combined = false;
        let mut feats = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            if !level.skip && !combined {
                x = reverse_patches(&x, rows, cols)?;
                combined = true;
            }
            if level.upsample {
                x = x.upsample_nearest2d_vec(None::<&[i64]>, &[2.0, 2.0][..]);
            }
            x = level.conv.forward(&x, train);
            x = if level.skip {
                let mut s = skips[level.level - 1].shallow_clone();
                if combined {
                    s = reverse_patches(&s, rows, cols)?;
                }
                level.second.forward(&Tensor::cat(&[&x, &s], 1), train)
            } else {
                level.second.forward(&x, train)
            };
            if let Some(m) = &level.matrix {
                x = m.read_map(&x, k, shrinkage)?;
            }
            feats.push(x.shallow_clone());
        }
        if !combined {
            x = reverse_patches(&x, rows, cols)?;
        }
        let x = x.upsample_nearest2d_vec(None::<&[i64]>, &[2.0, 2.0][..]);
        let recon = self.head.forward(&x, train).apply(&self.out).sigmoid();
        Ok((recon, feats))
    }
}

/// Whole-image discriminator producing one realness logit per image.
#[derive(Debug)]
pub struct Discriminator {
    blocks: Vec<(nn::Conv2D, Option<nn::BatchNorm>)>,
    out: nn::Conv2D,
    input_size: i64,
}

impl Discriminator {
    pub fn new(p: nn::Path, cfg: &NetworkConfig) -> Self {
        let mut c_in = 1;
        let conv_cfg = nn::ConvConfig { stride: 2, padding: 1, bias: false, ..Default::default() };
        let blocks = cfg
            .discriminator_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let lp = &p / format!("level{}", i + 1);
                let conv = nn::conv2d(&lp / "conv", c_in, c, 4, conv_cfg);
                let bn = (i > 0).then(|| nn::batch_norm2d(&lp / "bn", c, Default::default()));
                c_in = c;
                (conv, bn)
            })
            .collect::<Vec<_>>();
        let final_size = cfg.input_size >> cfg.discriminator_channels.len();
        let out = nn::conv2d(&p / "out", c_in, 1, final_size, Default::default());
        Discriminator { blocks, out, input_size: cfg.input_size }
    }

    /// Realness logits, `[b]`.
    pub fn logits(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let size = images.size();
        if size.len() != 4 || size[1] != 1 || size[2] != self.input_size || size[3] != self.input_size {
            return Err(SquidError::shape(format!("[b, 1, {0}, {0}]", self.input_size), format!("{size:?}")));
        }
        let mut x = images.shallow_clone();
        for (conv, bn) in &self.blocks {
            x = conv.forward(&x);
            if let Some(bn) = bn {
                x = bn.forward_t(&x, train);
            }
            x = x.relu();
        }
        Ok(x.apply(&self.out).flatten(0, -1))
    }

    /// Realness probabilities in `(0, 1)`, `[b]`.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.logits(images, train)?.sigmoid())
    }
}

#[cfg(test)]
mod tests {
    use tch::{Device, Kind};

    use super::*;

    fn vs() -> nn::VarStore {
        nn::VarStore::new(Device::Cpu)
    }

    #[test]
    fn divide_128_into_four_64_patches() {
        let x = Tensor::randn([2, 1, 128, 128], (Kind::Float, Device::Cpu));
        let p = divide_patches(&x, 2, 2).unwrap();
        assert_eq!(p.size(), vec![8, 1, 64, 64]);
        // patch (0, 1) of image 1 is its top-right quadrant
        let expect = x.get(1).narrow(1, 0, 64).narrow(2, 64, 64);
        assert!(p.get(5).equal(&expect));
    }

    #[test]
    fn single_patch_is_identity() {
        let x = Tensor::randn([3, 2, 16, 16], (Kind::Float, Device::Cpu));
        assert!(divide_patches(&x, 1, 1).unwrap().equal(&x));
    }

    #[test]
    fn reverse_inverts_divide() {
        let x = Tensor::randn([2, 3, 96, 96], (Kind::Float, Device::Cpu));
        assert!(reverse_patches(&divide_patches(&x, 3, 3).unwrap(), 3, 3).unwrap().equal(&x));
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let x = Tensor::zeros([1, 1, 10, 10], (Kind::Float, Device::Cpu));
        assert!(divide_patches(&x, 3, 3).is_err());
    }

    #[test]
    fn encoder_level_shapes() {
        let vs = vs();
        let cfg = NetworkConfig::default();
        let enc = Encoder::new(vs.root(), &cfg);
        let x = Tensor::rand([4 * 2, 1, 64, 64], (Kind::Float, Device::Cpu));
        let (f, skips) = enc.forward(&x, false).unwrap();
        assert_eq!(f.size(), vec![8, 256, 4, 4]);
        assert_eq!(skips.len(), 4);
        let sizes: Vec<_> = skips.iter().map(|s| s.size()).collect();
        assert_eq!(sizes, vec![vec![8, 32, 32, 32], vec![8, 64, 16, 16], vec![8, 128, 8, 8], vec![8, 256, 4, 4]]);
        assert!(enc.forward(&Tensor::zeros([1, 1, 32, 32], (Kind::Float, Device::Cpu)), false).is_err());
    }

    #[test]
    fn student_and_teacher_reconstruct_full_images() {
        let vs = vs();
        let cfg = NetworkConfig::default();
        let enc = Encoder::new(vs.root() / "enc", &cfg);
        let student = Generator::student(vs.root() / "student", &cfg, Some(DecoderMemory { slots: 50 }));
        let teacher = Generator::teacher(vs.root() / "teacher", &cfg);
        let x = divide_patches(&Tensor::rand([2, 1, 128, 128], (Kind::Float, Device::Cpu)), 2, 2).unwrap();
        let (f, skips) = enc.forward(&x, true).unwrap();
        let (s, sf) = student.forward(&f, &skips, true, 5, Shrinkage::Gumbel).unwrap();
        let (t, tf) = teacher.forward(&f, &skips, true, 5, Shrinkage::Gumbel).unwrap();
        assert_eq!(s.size(), vec![2, 1, 128, 128]);
        assert_eq!(t.size(), s.size());
        assert_eq!(sf.len(), 4);
        for (a, b) in sf.iter().zip(&tf) {
            assert_eq!(a.size(), b.size());
        }
        assert!(s.min().double_value(&[]) >= 0.0 && s.max().double_value(&[]) <= 1.0);
        assert_eq!(student.matrices().map(|(l, _)| l).collect::<Vec<_>>(), vec![4, 3]);
        assert!(!teacher.has_memory());
    }

    #[test]
    fn discriminator_emits_one_probability_per_image() {
        let vs = vs();
        let cfg = NetworkConfig::default();
        let d = Discriminator::new(vs.root(), &cfg);
        let p = d.forward(&Tensor::rand([3, 1, 128, 128], (Kind::Float, Device::Cpu)), false).unwrap();
        assert_eq!(p.size(), vec![3]);
        let v = Vec::<f32>::try_from(p).unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(d.forward(&Tensor::rand([1, 1, 96, 96], (Kind::Float, Device::Cpu)), false).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert!(NetworkConfig::digit_anatomy().validate().is_ok());
        let bad = NetworkConfig { input_size: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = NetworkConfig { encoder_channels: vec![1, 2, 3], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
