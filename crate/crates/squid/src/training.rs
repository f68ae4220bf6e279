//! Adversarial training with knowledge distillation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Kind, Reduction, Tensor};

use crate::checkpoint::{self, SaveInfo};
use crate::error::{Result, SquidError};
use crate::eval::roc_auc;
use crate::model::{ForwardOutput, Squid};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub teacher: f64,
    pub student: f64,
    pub distillation: f64,
    pub generator: f64,
    pub discriminator: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { teacher: 0.01, student: 10.0, distillation: 0.001, generator: 0.005, discriminator: 0.005 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.teacher, self.student, self.distillation, self.generator, self.discriminator];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SquidError::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub lr_min: f64,
    pub weight_decay: f64,
    /// The generator side is updated on every `generator_interval`-th step.
    pub generator_interval: u64,
    pub weights: LossWeights,
    pub augment: bool,
    pub max_translate: f64,
    pub scale_range: [f64; 2],
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 200,
            lr: 1e-4,
            lr_min: 2e-5,
            weight_decay: 1e-5,
            generator_interval: 2,
            weights: LossWeights::default(),
            augment: true,
            max_translate: 0.05,
            scale_range: [0.95, 1.05],
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(SquidError::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if self.generator_interval == 0 {
            return bad("generator_interval must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("learning rates must satisfy 0 <= lr_min <= lr, lr > 0");
        }
        if !(self.max_translate >= 0.0 && self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return bad("invalid augmentation ranges");
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs.max(1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// The five (unweighted) loss terms as graph tensors.
#[derive(Debug)]
pub struct LossTerms {
    pub teacher: Tensor,
    pub student: Tensor,
    pub distillation: Tensor,
    pub generator: Tensor,
    pub discriminator: Tensor,
}

/// Scalar values of the five terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub teacher: f64,
    pub student: f64,
    pub distillation: f64,
    pub generator: f64,
    pub discriminator: f64,
}

impl LossTerms {
    /// Weighted generator-side objective.
    pub fn generator_objective(&self, w: &LossWeights) -> Tensor {
        &self.teacher * w.teacher + &self.student * w.student + &self.distillation * w.distillation + &self.generator * w.generator
    }

    pub fn discriminator_objective(&self, w: &LossWeights) -> Tensor {
        &self.discriminator * w.discriminator
    }

    pub fn bundle(&self) -> LossBundle {
        let v = |t: &Tensor| t.double_value(&[]);
        LossBundle {
            teacher: v(&self.teacher),
            student: v(&self.student),
            distillation: v(&self.distillation),
            generator: v(&self.generator),
            discriminator: v(&self.discriminator),
        }
    }
}

impl LossBundle {
    pub fn generator_objective(&self, w: &LossWeights) -> f64 {
        self.teacher * w.teacher + self.student * w.student + self.distillation * w.distillation + self.generator * w.generator
    }
}

/// Binary cross-entropy of realness logits against a constant target.
pub fn bce_logits(logits: &Tensor, target: f64) -> Tensor {
    logits.binary_cross_entropy_with_logits::<Tensor>(&logits.full_like(target), None, None, Reduction::Mean)
}

/// Reconstruction, distillation and adversarial losses.
///
/// `real_logits` are the discriminator outputs on `images`; `fake_logits` those
/// on the student reconstruction (detached or not, depending on the caller).
pub fn compute_losses(images: &Tensor, out: &ForwardOutput, real_logits: &Tensor, fake_logits: &Tensor) -> Result<LossTerms> {
    if out.student.size() != images.size() || out.teacher.size() != images.size() {
        return Err(SquidError::shape(format!("{:?}", images.size()), format!("{:?}", out.student.size())));
    }
    let mut distillation = Tensor::zeros([], (Kind::Float, images.device()));
    for pair in &out.levels {
        if pair.student.size() != pair.teacher.size() {
            return Err(SquidError::shape(format!("{:?}", pair.teacher.size()), format!("{:?}", pair.student.size())));
        }
        distillation += pair.student.mse_loss(&pair.teacher, Reduction::Mean);
    }
    Ok(LossTerms {
        teacher: out.teacher.mse_loss(images, Reduction::Mean),
        student: out.student.mse_loss(images, Reduction::Mean),
        distillation,
        generator: bce_logits(fake_logits, 1.0),
        discriminator: bce_logits(real_logits, 1.0) + bce_logits(fake_logits, 0.0),
    })
}

/// Random translation and isotropic scaling about the centre with bilinear
/// sampling and zero fill. `image` is row-major `size x size`.
pub fn augment_image(image: &[f32], size: usize, translate: (f64, f64), scale: f64) -> Vec<f32> {
    let n = size as f64;
    let c = (n - 1.0) / 2.0;
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= size as i64 || x >= size as i64 {
            0.0
        } else {
            image[y as usize * size + x as usize] as f64
        }
    };
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let sx = (x as f64 - c - translate.0 * n) / scale + c;
            let sy = (y as f64 - c - translate.1 * n) / scale + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x0 + 1) * fx * (1.0 - fy) + at(y0 + 1, x0) * (1.0 - fx) * fy + at(y0 + 1, x0 + 1) * fx * fy;
            out[y * size + x] = v as f32;
        }
    }
    out
}

/// Augments every image of a `[b, 1, s, s]` batch with independent draws.
pub fn augment(images: &Tensor, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let size = images.size();
    if size.len() != 4 || size[1] != 1 || size[2] != size[3] {
        return Err(SquidError::shape("[b, 1, s, s]", format!("{size:?}")));
    }
    let s = size[2] as usize;
    let flat = Vec::<f32>::try_from(images.to_kind(Kind::Float).flatten(0, -1))?;
    let mut out = Vec::with_capacity(flat.len());
    for img in flat.chunks(s * s) {
        let t = cfg.max_translate;
        let translate = (rng.gen_range(-t..=t), rng.gen_range(-t..=t));
        let scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        out.extend(augment_image(img, s, translate, scale));
    }
    Ok(Tensor::from_slice(&out).view(size.as_slice()).to_device(images.device()))
}

/// Result of one [`Trainer::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub generator_updated: bool,
    pub discriminator_loss: f64,
    /// All five terms, present on generator steps.
    pub losses: Option<LossBundle>,
    /// The weighted generator objective that was minimised.
    pub objective: Option<f64>,
}

/// Number of optimiser updates applied so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateCounts {
    pub generator: u64,
    pub discriminator: u64,
}

pub struct Trainer {
    model: Squid,
    cfg: TrainConfig,
    opt_g: nn::Optimizer,
    opt_d: nn::Optimizer,
    step: u64,
    updates: UpdateCounts,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("cfg", &self.cfg).field("step", &self.step).field("updates", &self.updates).finish()
    }
}

impl Trainer {
    pub fn new(model: Squid, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let adam = nn::Adam { wd: cfg.weight_decay, ..Default::default() };
        let opt_g = adam.build(model.generator_vars(), cfg.lr)?;
        let opt_d = adam.build(model.discriminator_vars(), cfg.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Trainer { model, cfg: cfg.clone(), opt_g, opt_d, step: 0, updates: UpdateCounts::default(), rng })
    }

    pub fn model(&self) -> &Squid {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Squid {
        &mut self.model
    }

    pub fn into_model(self) -> Squid {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn updates(&self) -> UpdateCounts {
        self.updates
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    /// One discriminator update and, every `generator_interval` steps, one
    /// generator-side update. The queue is written exactly once per step.
    ///
    /// `labels` (true = abnormal) guards against contaminated training batches.
    pub fn train_step(&mut self, batch: &Tensor, labels: Option<&[bool]>) -> Result<StepReport> {
        if let Some(i) = labels.and_then(|l| l.iter().position(|&a| a)) {
            return Err(SquidError::AbnormalInTraining(format!("batch item {i}")));
        }
        let images = batch.to_device(self.model.device());
        let images = if self.cfg.augment { augment(&images, &self.cfg, &mut self.rng)? } else { images };
        let generator_step = self.step % self.cfg.generator_interval == 0;
        let w = self.cfg.weights;
        let report = if generator_step {
            let out = self.model.forward(&images, Mode::Train, true)?;
            let real = self.model.discriminate(&images, true)?;
            let fake_detached = self.model.discriminate(&out.student.detach(), true)?;
            let d_raw = bce_logits(&real, 1.0) + bce_logits(&fake_detached, 0.0);
            self.opt_d.backward_step(&(&d_raw * w.discriminator));
            self.updates.discriminator += 1;

            let fake = self.model.discriminate(&out.student, true)?;
            let terms = compute_losses(&images, &out, &real.detach(), &fake)?;
            let objective = terms.generator_objective(&w);
            self.opt_g.backward_step(&objective);
            self.updates.generator += 1;
            let mut bundle = terms.bundle();
            bundle.discriminator = d_raw.double_value(&[]);
            StepReport { step: self.step, generator_updated: true, discriminator_loss: bundle.discriminator, losses: Some(bundle), objective: Some(objective.double_value(&[])) }
        } else {
            let fake = tch::no_grad(|| self.model.reconstruct(&images, Mode::Train, true))?;
            let real = self.model.discriminate(&images, true)?;
            let fake = self.model.discriminate(&fake, true)?;
            let raw = bce_logits(&real, 1.0) + bce_logits(&fake, 0.0);
            self.opt_d.backward_step(&(&raw * w.discriminator));
            self.updates.discriminator += 1;
            StepReport { step: self.step, generator_updated: false, discriminator_loss: raw.double_value(&[]), losses: None, objective: None }
        };
        self.step += 1;
        Ok(report)
    }
}

/// Per-epoch record written to `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_dist")]
    pub l_dist: f64,
    #[serde(rename = "L_gen")]
    pub l_gen: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    pub val_auc: Option<f64>,
}

/// Labelled validation images, `true` = abnormal.
#[derive(Debug)]
pub struct Validation<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Orientation-free validation AUC of raw discriminator outputs.
pub fn validation_auc(model: &mut Squid, val: &Validation<'_>) -> Result<f64> {
    let raw = model.raw_scores(val.images)?;
    let auc = roc_auc(&raw, val.labels)?;
    Ok(auc.max(1.0 - auc))
}

/// Trains on normal images, keeping the checkpoint with the best validation AUC
/// (or the last one without validation data) at `out_dir/best.safetensors`.
///
/// Returns the trained model restored to the best checkpoint.
pub fn fit(model: Squid, cfg: &TrainConfig, seed: u64, train: &Tensor, val: Option<Validation<'_>>, out_dir: &Path, variant: Option<&str>) -> Result<(Squid, FitReport)> {
    let n = train.size()[0] as usize;
    if n == 0 {
        return Err(SquidError::Empty("training set"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SquidError::io(out_dir, e))?;
    let ckpt = out_dir.join("best.safetensors");
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = crate::eval::csv_writer(&metrics_path)?;
    let mut trainer = Trainer::new(model, cfg, seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(2);
    let mut order: Vec<i64> = (0..n as i64).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        trainer.set_lr(cfg.lr_at(epoch));
        order.shuffle(&mut order_rng);
        let mut sums = LossBundle::default();
        let (mut g_steps, mut d_steps) = (0usize, 0usize);
        // Batch norm needs at least two samples, so a trailing singleton is dropped.
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() > 1 || n == 1) {
            let batch = train.index_select(0, &Tensor::from_slice(chunk));
            let r = trainer.train_step(&batch, None)?;
            sums.discriminator += r.discriminator_loss;
            d_steps += 1;
            if let Some(l) = r.losses {
                sums.teacher += l.teacher;
                sums.student += l.student;
                sums.distillation += l.distillation;
                sums.generator += l.generator;
                g_steps += 1;
            }
        }
        let g = g_steps.max(1) as f64;
        let val_auc = match &val {
            Some(v) => Some(validation_auc(trainer.model_mut(), v)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            l_t: sums.teacher / g,
            l_s: sums.student / g,
            l_dist: sums.distillation / g,
            l_gen: sums.generator / g,
            l_dis: sums.discriminator / d_steps.max(1) as f64,
            val_auc,
        };
        if [m.l_t, m.l_s, m.l_dist, m.l_gen, m.l_dis].iter().any(|x| !x.is_finite()) {
            return Err(SquidError::InvalidArgument(format!("non-finite loss at epoch {}", epoch + 1)));
        }
        log::info!(
            "epoch {:>3} lr {:.2e} L_t {:.5} L_s {:.5} L_dist {:.5} L_gen {:.4} L_dis {:.4} val_auc {}",
            m.epoch,
            cfg.lr_at(epoch),
            m.l_t,
            m.l_s,
            m.l_dist,
            m.l_gen,
            m.l_dis,
            val_auc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        metrics.serialize(m).and_then(|_| metrics.flush().map_err(Into::into)).map_err(|e| crate::eval::csv_error(&metrics_path, e))?;
        history.push(m);
        let improved = match (val_auc, best) {
            (None, _) => true,
            (Some(a), Some((_, b))) => a > b,
            (Some(_), None) => true,
        };
        if improved {
            best = Some((epoch + 1, val_auc.unwrap_or(f64::NAN)));
            stale = 0;
            let info = SaveInfo { epoch: Some(epoch + 1), val_auc, variant: variant.map(str::to_owned), ..Default::default() };
            checkpoint::save(trainer.model(), &info, &ckpt)?;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                log::info!("no validation improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    let device = trainer.model().device();
    drop(trainer);
    let (model, meta) = checkpoint::load(&ckpt, device)?;
    let (best_epoch, _) = best.expect("at least one epoch ran");
    Ok((model, FitReport { history, best_epoch, best_val_auc: meta.val_auc, checkpoint: ckpt }))
}
