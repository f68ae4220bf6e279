//! Run configuration: one TOML file with sections, validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::Device;

use crate::data::{IngestConfig, XrayLayout};
use crate::digitanatomy::GenConfig;
use crate::error::{Result, SquidError};
use crate::model::SquidConfig;
use crate::training::TrainConfig;

/// Environment variable that replaces `data.root` when a configuration is loaded.
pub const DATA_ROOT_ENV: &str = "SQUID_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    #[default]
    Digitanatomy,
    Zhanglab,
    ChexpertFolders,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub root: PathBuf,
    /// Radiograph layouts only: validation images carved from the training folders.
    pub val_normal: usize,
    pub val_abnormal: usize,
    pub normal_dir: Option<String>,
    pub abnormal_dir: Option<String>,
    /// Use at most this many training images.
    pub max_train: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { kind: DataKind::Digitanatomy, root: PathBuf::from("data/digitanatomy"), val_normal: 100, val_abnormal: 100, normal_dir: None, abnormal_dir: None, max_train: None }
    }
}

impl DataConfig {
    pub fn ingest(&self, size: u32, seed: u64) -> Option<IngestConfig> {
        let layout = match self.kind {
            DataKind::Digitanatomy => return None,
            DataKind::Zhanglab => XrayLayout::Zhanglab,
            DataKind::ChexpertFolders => XrayLayout::ChexpertFolders,
        };
        Some(IngestConfig {
            layout,
            normal_dir: self.normal_dir.clone(),
            abnormal_dir: self.abnormal_dir.clone(),
            val_normal: self.val_normal,
            val_abnormal: self.val_abnormal,
            size,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Anomaly-score threshold for Acc/F1/sensitivity/specificity.
    pub threshold: f64,
    /// Calibrate on at most this many training images.
    pub calibration_cap: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5, calibration_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `cpu`, `cuda` or `auto`.
    pub device: String,
    pub out_dir: PathBuf,
    pub model: SquidConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub digitanatomy: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            device: "cpu".into(),
            out_dir: PathBuf::from("runs/squid"),
            model: SquidConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            digitanatomy: GenConfig::default(),
        }
    }
}

/// Parses `a.b.c=value`, where `value` is any TOML value or else a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| SquidError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(SquidError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| SquidError::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// DigitAnatomy preset: 96x96 inputs split into 3x3 patches.
    pub fn digit_anatomy() -> Self {
        RunConfig { model: SquidConfig::digit_anatomy(), out_dir: PathBuf::from("runs/digitanatomy"), ..Default::default() }
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| SquidError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SquidError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults), applies `--set` overrides and then
    /// the data-root environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| SquidError::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|r| !r.is_empty()) {
            cfg.data.root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SquidError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.digitanatomy.validate()?;
        self.device()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(SquidError::Config(format!("eval.threshold {} outside [0, 1]", self.eval.threshold)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(SquidError::Config("seed must fit in 63 bits".into()));
        }
        Ok(())
    }

    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            "cuda" => Ok(Device::Cuda(0)),
            "auto" => Ok(Device::cuda_if_available()),
            other => Err(SquidError::Config(format!("unknown device {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_built_in_defaults() {
        let cfg = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.network.input_size, 128);
        assert_eq!(cfg.model.memory.capacity, 200);
        assert_eq!(cfg.model.memory.top_k, 5);
        assert_eq!(cfg.model.inpaint.rho, 0.95);
        assert_eq!((cfg.train.batch_size, cfg.train.epochs, cfg.train.generator_interval), (16, 200, 2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepochz = 3\n", &[]), Err(SquidError::Config(_))));
        assert!(matches!(RunConfig::from_toml("", &["model.memory.slotz=3".into()]), Err(SquidError::Config(_))));
    }

    #[test]
    fn overrides_apply_with_types() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\n",
            &["train.epochs=7".into(), "model.network.patch_grid=[3, 3]".into(), "model.network.input_size=96".into(), "data.kind=zhanglab".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.network.patch_grid, [3, 3]);
        assert_eq!(cfg.data.kind, DataKind::Zhanglab);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::from_toml("", &["train.generator_interval=0".into()]).is_err());
        assert!(RunConfig::from_toml("", &["model.network.input_size=100".into()]).is_err());
        assert!(RunConfig::from_toml("", &["device=tpu".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::digit_anatomy();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap(), &[]).unwrap(), cfg);
    }
}
