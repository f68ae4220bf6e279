//! Model checkpoints: one safetensors file holding every array plus a TOML
//! sidecar with the configuration, random state and calibration.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::error::{Result, SquidError};
use crate::eval::Calibration;
use crate::inpaint::PatchMemory;
use crate::memory::MemoryQueue;
use crate::model::{Squid, SquidConfig};

const FORMAT: &str = "squid-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    /// Hex-encoded 32-byte seed.
    seed: String,
    stream: String,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || SquidError::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad())?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything stored in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    format: String,
    version: u32,
    pub model: SquidConfig,
    rng: RngState,
    pub calibration: Option<Calibration>,
    /// Training epoch the weights come from, 1-based.
    pub epoch: Option<usize>,
    pub val_auc: Option<f64>,
    pub variant: Option<String>,
}

/// Sidecar path belonging to a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = tmp_path(path);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| SquidError::io(path, e))
}

/// Extra information stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaveInfo {
    pub calibration: Option<Calibration>,
    pub epoch: Option<usize>,
    pub val_auc: Option<f64>,
    pub variant: Option<String>,
}

/// Writes `model` to `path` and its sidecar; each file is replaced atomically.
pub fn save(model: &Squid, info: &SaveInfo, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| SquidError::io(dir, e))?;
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in model.generator_vars().variables() {
        tensors.push((format!("generator/{name}"), t.detach()));
    }
    for (name, t) in model.discriminator_vars().variables() {
        tensors.push((format!("discriminator/{name}"), t.detach()));
    }
    if let PatchMemory::Queue(q) = model.memory() {
        let as_i64 = |v: &[usize]| Tensor::from_slice(&v.iter().map(|&x| x as i64).collect::<Vec<_>>());
        tensors.push(("queue/patterns".into(), q.patterns().detach()));
        tensors.push(("queue/pointers".into(), as_i64(q.pointers())));
        tensors.push(("queue/fills".into(), as_i64(q.fills())));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config().clone(),
        rng: RngState::capture(model.rng()),
        calibration: info.calibration,
        epoch: info.epoch,
        val_auc: info.val_auc,
        variant: info.variant.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| SquidError::Checkpoint(e.to_string()))?;
    write_atomic(path, |tmp| Ok(Tensor::write_safetensors(&tensors, tmp)?))?;
    let sidecar = sidecar_path(path);
    write_atomic(&sidecar, |tmp| std::fs::write(tmp, text).map_err(|e| SquidError::io(tmp, e)))
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| SquidError::io(&sidecar, e))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| SquidError::Checkpoint(format!("{}: {e}", sidecar.display())))?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(SquidError::Checkpoint(format!("unsupported checkpoint {} v{}", meta.format, meta.version)));
    }
    Ok(meta)
}

/// Rewrites only the sidecar, e.g. after calibration.
pub fn write_meta(path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| SquidError::Checkpoint(e.to_string()))?;
    let sidecar = sidecar_path(path);
    write_atomic(&sidecar, |tmp| std::fs::write(tmp, text).map_err(|e| SquidError::io(tmp, e)))
}

fn restore_store(vars: &tch::nn::VarStore, prefix: &str, stored: &mut std::collections::HashMap<String, Tensor>) -> Result<()> {
    tch::no_grad(|| {
        for (name, mut var) in vars.variables() {
            let key = format!("{prefix}/{name}");
            let src = stored.remove(&key).ok_or_else(|| SquidError::Checkpoint(format!("missing array {key}")))?;
            if src.size() != var.size() {
                return Err(SquidError::Checkpoint(format!("array {key} has shape {:?}, model expects {:?}", src.size(), var.size())));
            }
            var.copy_(&src);
        }
        Ok(())
    })
}

/// Rebuilds the model saved at `path`.
pub fn load(path: &Path, device: Device) -> Result<(Squid, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let mut model = Squid::new(&meta.model, 0, device)?;
    let mut stored: std::collections::HashMap<String, Tensor> = Tensor::read_safetensors(path)
        .map_err(|e| SquidError::Checkpoint(format!("{}: {e}", path.display())))?
        .into_iter()
        .collect();
    restore_store(model.generator_vars(), "generator", &mut stored)?;
    restore_store(model.discriminator_vars(), "discriminator", &mut stored)?;
    if let PatchMemory::Queue(q) = model.memory() {
        let mut take = |k: &str| stored.remove(k).ok_or_else(|| SquidError::Checkpoint(format!("missing array {k}")));
        let patterns = take("queue/patterns")?;
        let to_usize = |t: Tensor| -> Result<Vec<usize>> { Ok(Vec::<i64>::try_from(t.to_kind(Kind::Int64))?.into_iter().map(|x| x as usize).collect()) };
        let pointers = to_usize(take("queue/pointers")?)?;
        let fills = to_usize(take("queue/fills")?)?;
        if patterns.size() != q.patterns().size() {
            return Err(SquidError::Checkpoint(format!("queue shape {:?} does not match the config {:?}", patterns.size(), q.patterns().size())));
        }
        let queue = MemoryQueue::from_state(&patterns.to_device(device), pointers, fills)?;
        *model.memory_mut() = PatchMemory::Queue(queue);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(SquidError::Checkpoint(format!("unexpected array {extra}")));
    }
    model.set_rng(meta.rng.restore()?);
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use rand::RngCore;

    use super::*;
    use crate::networks::NetworkConfig;
    use crate::Mode;

    fn tiny() -> SquidConfig {
        let mut cfg = SquidConfig::default();
        cfg.network = NetworkConfig { input_size: 32, patch_grid: [2, 2], encoder_channels: vec![2, 4, 4, 8], discriminator_channels: vec![2, 4], memory_levels: vec![4, 3] };
        cfg.memory.capacity = 4;
        cfg.memory.decoder_slots = 6;
        cfg
    }

    #[test]
    fn round_trip_preserves_scores_queue_and_rng() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = Squid::new(&tiny(), 5, Device::Cpu).unwrap();
        let x = Tensor::rand([3, 1, 32, 32], (Kind::Float, Device::Cpu));
        let _ = m.forward(&x, Mode::Train, true).unwrap();
        let cal = Calibration { mu: 0.1 + 1e-17, sigma: 0.3, polarity: -1.0, samples: 9 };
        save(&m, &SaveInfo { calibration: Some(cal), epoch: Some(2), ..Default::default() }, &path).unwrap();
        let (mut back, meta) = load(&path, Device::Cpu).unwrap();
        assert_eq!(meta.calibration, Some(cal));
        assert_eq!(meta.epoch, Some(2));
        assert_eq!(m.raw_scores(&x).unwrap(), back.raw_scores(&x).unwrap());
        let (q, r) = (m.memory().as_queue().unwrap(), back.memory().as_queue().unwrap());
        assert!(q.patterns().equal(r.patterns()));
        assert_eq!((q.pointers(), q.fills()), (r.pointers(), r.fills()));
        let mut a = m.rng().clone();
        let mut b = back.rng().clone();
        assert_eq!(a.next_u64(), b.next_u64());
        assert!(!dir.path().join("m.safetensors.tmp").exists());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let m = Squid::new(&tiny(), 0, Device::Cpu).unwrap();
        save(&m, &SaveInfo::default(), &path).unwrap();
        let mut meta = read_meta(&path).unwrap();
        meta.model.memory.capacity = 5;
        write_meta(&path, &meta).unwrap();
        assert!(matches!(load(&path, Device::Cpu), Err(SquidError::Checkpoint(_))));
    }

    #[test]
    fn missing_sidecar_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(&dir.path().join("none.safetensors"), Device::Cpu), Err(SquidError::Io { .. })));
    }
}
