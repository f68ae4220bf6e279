//! The assembled SQUID model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, Device, Kind, Tensor};

use crate::error::{Result, SquidError};
use crate::inpaint::{InpaintBlock, InpaintConfig, InpaintStep, PatchMemory, ShortcutKind};
use crate::memory::{partition_regions, MemoryMatrix, MemoryQueue, RegionMap, Shrinkage};
use crate::networks::{divide_patches, DecoderMemory, Discriminator, Encoder, Generator, LevelFeaturePair, NetworkConfig};
use crate::Mode;

/// Storage backing the in-painting memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryKind {
    #[default]
    Queue,
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub kind: MemoryKind,
    /// Patterns per region.
    pub capacity: usize,
    /// One region per patch location; when false every patch shares a single
    /// region holding `capacity * patches` patterns.
    pub space_aware: bool,
    pub top_k: i64,
    pub shrinkage: Shrinkage,
    pub decoder_memory: bool,
    pub decoder_slots: i64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            kind: MemoryKind::Queue,
            capacity: 200,
            space_aware: true,
            top_k: 5,
            shrinkage: Shrinkage::Gumbel,
            decoder_memory: true,
            decoder_slots: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SquidConfig {
    pub network: NetworkConfig,
    pub memory: MemoryConfig,
    pub inpaint: InpaintConfig,
    /// When false, teacher gradients flow back into the encoder.
    pub stop_gradient: bool,
}

impl Default for SquidConfig {
    fn default() -> Self {
        SquidConfig {
            network: NetworkConfig::default(),
            memory: MemoryConfig::default(),
            inpaint: InpaintConfig::default(),
            stop_gradient: true,
        }
    }
}

impl SquidConfig {
    pub fn digit_anatomy() -> Self {
        SquidConfig { network: NetworkConfig::digit_anatomy(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let m = &self.memory;
        if m.capacity == 0 || m.top_k <= 0 || m.decoder_slots <= 0 {
            return Err(SquidError::Config("memory capacity, top_k and decoder_slots must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.inpaint.rho) {
            return Err(SquidError::Config(format!("rho {} outside [0, 1]", self.inpaint.rho)));
        }
        Ok(())
    }

    pub fn region_map(&self) -> Result<RegionMap> {
        let [r, c] = self.network.patch_grid;
        if self.memory.space_aware {
            partition_regions(r, c)
        } else {
            RegionMap::shared(r, c)
        }
    }
}

/// Ablation rows: the full model and each single-component removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSpaceAware,
    NoInpainting,
    NoGumbel,
    NoDistillation,
    NoStopGradient,
    MatrixInsteadOfQueue,
    NoMaskedShortcut,
    NoDecoderMemory,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoSpaceAware,
        Variant::NoInpainting,
        Variant::NoGumbel,
        Variant::NoDistillation,
        Variant::NoStopGradient,
        Variant::MatrixInsteadOfQueue,
        Variant::NoMaskedShortcut,
        Variant::NoDecoderMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpaceAware => "no-space-aware",
            Variant::NoInpainting => "no-inpainting",
            Variant::NoGumbel => "no-gumbel",
            Variant::NoDistillation => "no-distillation",
            Variant::NoStopGradient => "no-stop-gradient",
            Variant::MatrixInsteadOfQueue => "matrix-instead-of-queue",
            Variant::NoMaskedShortcut => "no-masked-shortcut",
            Variant::NoDecoderMemory => "no-decoder-memory",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| SquidError::Config(format!("unknown variant {s:?}")))
    }

    /// Applies the toggle to a model config. Distillation lives in the loss
    /// weights, so [`Variant::NoDistillation`] only reports itself through
    /// [`Variant::distillation`].
    pub fn apply(self, cfg: &mut SquidConfig) {
        match self {
            Variant::Full | Variant::NoDistillation => {}
            Variant::NoSpaceAware => cfg.memory.space_aware = false,
            Variant::NoInpainting => cfg.inpaint.enabled = false,
            Variant::NoGumbel => cfg.memory.shrinkage = Shrinkage::Hard,
            Variant::NoStopGradient => cfg.stop_gradient = false,
            Variant::MatrixInsteadOfQueue => cfg.memory.kind = MemoryKind::Matrix,
            Variant::NoMaskedShortcut => cfg.inpaint.shortcut = ShortcutKind::Residual,
            Variant::NoDecoderMemory => cfg.memory.decoder_memory = false,
        }
    }

    pub fn distillation(self) -> bool {
        self != Variant::NoDistillation
    }
}

/// Everything one generator pass produces.
#[derive(Debug)]
pub struct ForwardOutput {
    pub student: Tensor,
    pub teacher: Tensor,
    /// Deepest level first.
    pub levels: Vec<LevelFeaturePair>,
}

/// Encoder, in-painting block, student and teacher generators, discriminator and memory.
///
/// Generator-side parameters (encoder, in-painting, both generators, a memory
/// matrix if used) live in [`Squid::generator_vars`]; the discriminator has its own store.
#[derive(Debug)]
pub struct Squid {
    cfg: SquidConfig,
    device: Device,
    generator_vars: nn::VarStore,
    discriminator_vars: nn::VarStore,
    encoder: Encoder,
    inpaint: InpaintBlock,
    student: Generator,
    teacher: Generator,
    discriminator: Discriminator,
    memory: PatchMemory,
    regions: RegionMap,
    rng: ChaCha8Rng,
}

/// Images per chunk when scoring without gradients.
const INFER_CHUNK: i64 = 32;

impl Squid {
    /// Builds a freshly initialised model; all parameter and queue initialisation is seeded.
    pub fn new(cfg: &SquidConfig, seed: u64, device: Device) -> Result<Self> {
        cfg.validate()?;
        tch::manual_seed(seed as i64);
        let generator_vars = nn::VarStore::new(device);
        let discriminator_vars = nn::VarStore::new(device);
        let root = generator_vars.root();
        let net = &cfg.network;
        let encoder = Encoder::new(&root / "encoder", net);
        let (bh, bw) = net.bottleneck_size();
        let inpaint = InpaintBlock::new(&root / "inpaint", &cfg.inpaint, net.patch_grid, (net.bottleneck_channels(), bh, bw))?;
        let decoder = cfg.memory.decoder_memory.then_some(DecoderMemory { slots: cfg.memory.decoder_slots });
        let student = Generator::student(&root / "student", net, decoder);
        let teacher = Generator::teacher(&root / "teacher", net);
        let discriminator = Discriminator::new(discriminator_vars.root(), net);
        let regions = cfg.region_map()?;
        let dim = inpaint.token_dim();
        let capacity = cfg.memory.capacity * net.n_patches() / regions.n_regions();
        let memory = match cfg.memory.kind {
            MemoryKind::Queue => PatchMemory::Queue(MemoryQueue::new(regions.n_regions(), capacity, dim as usize, device)?),
            MemoryKind::Matrix => PatchMemory::Matrix(MemoryMatrix::with_regions(&root / "patch_memory", regions.n_regions() as i64, capacity as i64, dim)),
        };
        Ok(Squid {
            cfg: cfg.clone(),
            device,
            generator_vars,
            discriminator_vars,
            encoder,
            inpaint,
            student,
            teacher,
            discriminator,
            memory,
            regions,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &SquidConfig {
        &self.cfg
    }

    pub fn device(&self) -> Device {
        self.device
    }

    pub fn generator_vars(&self) -> &nn::VarStore {
        &self.generator_vars
    }

    pub fn generator_vars_mut(&mut self) -> &mut nn::VarStore {
        &mut self.generator_vars
    }

    pub fn discriminator_vars(&self) -> &nn::VarStore {
        &self.discriminator_vars
    }

    pub fn discriminator_vars_mut(&mut self) -> &mut nn::VarStore {
        &mut self.discriminator_vars
    }

    pub fn memory(&self) -> &PatchMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut PatchMemory {
        &mut self.memory
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    pub fn student(&self) -> &Generator {
        &self.student
    }

    pub fn teacher(&self) -> &Generator {
        &self.teacher
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Names of generator-store variables belonging to the encoder.
    pub fn encoder_variables(&self) -> Vec<(String, Tensor)> {
        self.generator_vars.variables().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.cfg.network.input_size;
        let size = images.size();
        if size.len() != 4 || size[1] != 1 || size[2] != s || size[3] != s {
            return Err(SquidError::shape(format!("[b, 1, {s}, {s}]"), format!("{size:?}")));
        }
        Ok(())
    }

    /// Encodes `[b, 1, H, W]` images into patch features and skips.
    pub fn encode(&self, images: &Tensor, train: bool) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_images(images)?;
        let [r, c] = self.cfg.network.patch_grid;
        self.encoder.forward(&divide_patches(images, r, c)?, train)
    }

    fn inpaint_step(&self, mode: Mode, update_memory: bool) -> InpaintStep {
        InpaintStep { mode, update_memory, top_k: self.cfg.memory.top_k, shrinkage: self.cfg.memory.shrinkage }
    }

    fn inpaint_features(&mut self, features: &Tensor, mode: Mode, update_memory: bool) -> Result<Tensor> {
        let step = self.inpaint_step(mode, update_memory);
        self.inpaint.forward(features, &mut self.memory, &self.regions, step, &mut self.rng)
    }

    /// Student reconstruction only. In train mode batch norm uses batch statistics,
    /// masks are sampled and, with `update_memory`, the queue is written once.
    pub fn reconstruct(&mut self, images: &Tensor, mode: Mode, update_memory: bool) -> Result<Tensor> {
        let train = mode == Mode::Train;
        let (features, skips) = self.encode(images, train)?;
        let inpainted = self.inpaint_features(&features, mode, update_memory)?;
        let (k, shrink) = (self.cfg.memory.top_k, self.cfg.memory.shrinkage);
        Ok(self.student.forward(&inpainted, &skips, train, k, shrink)?.0)
    }

    /// Student and teacher reconstructions with the per-level features of both.
    pub fn forward(&mut self, images: &Tensor, mode: Mode, update_memory: bool) -> Result<ForwardOutput> {
        let train = mode == Mode::Train;
        let (features, skips) = self.encode(images, train)?;
        let (t_in, t_skips) = if self.cfg.stop_gradient {
            (features.detach(), skips.iter().map(Tensor::detach).collect::<Vec<_>>())
        } else {
            (features.shallow_clone(), skips.iter().map(Tensor::shallow_clone).collect())
        };
        let inpainted = self.inpaint_features(&features, mode, update_memory)?;
        let (k, shrink) = (self.cfg.memory.top_k, self.cfg.memory.shrinkage);
        let (student, s_feats) = self.student.forward(&inpainted, &skips, train, k, shrink)?;
        let (teacher, t_feats) = self.teacher.forward(&t_in, &t_skips, train, k, shrink)?;
        let levels = s_feats
            .into_iter()
            .zip(t_feats)
            .enumerate()
            .map(|(i, (s, t))| LevelFeaturePair { level: crate::networks::ENCODER_LEVELS - i, student: s, teacher: t })
            .collect();
        Ok(ForwardOutput { student, teacher, levels })
    }

    /// Discriminator realness logits, `[b]`.
    pub fn discriminate(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.discriminator.logits(images, train)
    }

    /// Raw discriminator probability on the student reconstruction, in inference
    /// mode and computed in double precision from the logit.
    pub fn raw_scores(&mut self, images: &Tensor) -> Result<Vec<f64>> {
        self.check_images(images)?;
        let n = images.size()[0];
        let mut out = Vec::with_capacity(n as usize);
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let chunk = images.narrow(0, start, len).to_device(self.device);
            let logits = tch::no_grad(|| -> Result<Tensor> {
                let recon = self.reconstruct(&chunk, Mode::Infer, false)?;
                self.discriminate(&recon, false)
            })?;
            let probs = logits.to_kind(Kind::Double).sigmoid();
            out.extend(Vec::<f64>::try_from(&probs)?);
            start += len;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SquidConfig {
        let mut cfg = SquidConfig::default();
        cfg.network = NetworkConfig {
            input_size: 64,
            patch_grid: [2, 2],
            encoder_channels: vec![4, 8, 8, 16],
            discriminator_channels: vec![4, 8],
            memory_levels: vec![4, 3],
        };
        cfg.memory.capacity = 6;
        cfg.memory.decoder_slots = 10;
        cfg
    }

    fn images(b: i64) -> Tensor {
        Tensor::rand([b, 1, 64, 64], (Kind::Float, Device::Cpu))
    }

    #[test]
    fn forward_shapes_match_input() {
        let mut m = Squid::new(&tiny(), 0, Device::Cpu).unwrap();
        let x = images(2);
        let out = m.forward(&x, Mode::Train, true).unwrap();
        assert_eq!(out.student.size(), x.size());
        assert_eq!(out.teacher.size(), x.size());
        assert_eq!(out.levels.iter().map(|l| l.level).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
        for l in &out.levels {
            assert_eq!(l.student.size(), l.teacher.size());
        }
        assert_eq!(m.discriminate(&out.student, false).unwrap().size(), vec![2]);
    }

    #[test]
    fn seed_fixes_initialisation() {
        let a = Squid::new(&tiny(), 3, Device::Cpu).unwrap();
        let b = Squid::new(&tiny(), 3, Device::Cpu).unwrap();
        let vb = b.generator_vars().variables();
        for (name, t) in a.generator_vars().variables() {
            assert!(t.equal(&vb[&name]), "{name}");
        }
        assert!(a.memory().as_queue().unwrap().patterns().equal(b.memory().as_queue().unwrap().patterns()));
    }

    #[test]
    fn raw_scores_are_probabilities_and_deterministic() {
        let mut m = Squid::new(&tiny(), 1, Device::Cpu).unwrap();
        let x = images(3);
        let a = m.raw_scores(&x).unwrap();
        let b = m.raw_scores(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&d| d > 0.0 && d < 1.0));
    }

    #[test]
    fn shared_region_keeps_total_capacity() {
        let mut cfg = tiny();
        Variant::NoSpaceAware.apply(&mut cfg);
        let m = Squid::new(&cfg, 0, Device::Cpu).unwrap();
        let q = m.memory().as_queue().unwrap();
        assert_eq!((q.regions(), q.capacity()), (1, 24));
    }

    #[test]
    fn variants_round_trip_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn variants_change_structure() {
        let base = tiny();
        for v in Variant::ALL.into_iter().filter(|&v| v != Variant::Full && v != Variant::NoDistillation) {
            let mut cfg = base.clone();
            v.apply(&mut cfg);
            assert_ne!(cfg, base, "{}", v.name());
        }
        let mut cfg = base.clone();
        Variant::MatrixInsteadOfQueue.apply(&mut cfg);
        let m = Squid::new(&cfg, 0, Device::Cpu).unwrap();
        assert!(m.memory().as_queue().is_none());
        let mut cfg = base;
        Variant::NoDecoderMemory.apply(&mut cfg);
        assert!(!Squid::new(&cfg, 0, Device::Cpu).unwrap().student().has_memory());
    }
}
