//! Image loading and dataset ingestion.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::digitanatomy::{DatasetManifest, Split};
use crate::error::{Result, SquidError};

/// Loads an image as single-channel `size x size` floats in `[0, 1]`, resizing bilinearly.
pub fn load_gray(path: &Path, size: u32) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => SquidError::io(path, io),
        other => SquidError::InvalidArgument(format!("unreadable image {}: {other}", path.display())),
    })?;
    let mut gray = img.to_luma8();
    if gray.width() != size || gray.height() != size {
        gray = image::imageops::resize(&gray, size, size, FilterType::Triangle);
    }
    Ok(gray.into_raw().into_iter().map(|p| p as f32 / 255.0).collect())
}

/// Images stacked as `[n, 1, size, size]` with labels (`true` = abnormal).
#[derive(Debug)]
pub struct LabelledImages {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<bool>,
    pub images: Tensor,
}

impl LabelledImages {
    pub fn load(items: &[(PathBuf, bool)], size: u32) -> Result<LabelledImages> {
        let mut pixels = Vec::with_capacity(items.len() * (size * size) as usize);
        for (p, _) in items {
            pixels.extend(load_gray(p, size)?);
        }
        let s = size as i64;
        Ok(LabelledImages {
            paths: items.iter().map(|(p, _)| p.clone()).collect(),
            labels: items.iter().map(|&(_, l)| l).collect(),
            images: Tensor::from_slice(&pixels).view([items.len() as i64, 1, s, s]),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` images (all of them if fewer).
    pub fn truncate(self, n: usize) -> LabelledImages {
        let n = n.min(self.len());
        LabelledImages { paths: self.paths[..n].to_vec(), labels: self.labels[..n].to_vec(), images: self.images.narrow(0, 0, n as i64) }
    }
}

/// File lists of the three splits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitFiles {
    pub train: Vec<(PathBuf, bool)>,
    pub val: Vec<(PathBuf, bool)>,
    pub test: Vec<(PathBuf, bool)>,
}

impl SplitFiles {
    pub fn from_digitanatomy(root: &Path) -> Result<SplitFiles> {
        let manifest = DatasetManifest::read(root)?;
        let files = |s: Split| manifest.split(s).map(|e| (root.join(&e.path), e.abnormal)).collect::<Vec<_>>();
        let out = SplitFiles { train: files(Split::Train), val: files(Split::Val), test: files(Split::Test) };
        if let Some((p, _)) = out.train.iter().find(|(_, a)| *a) {
            return Err(SquidError::AbnormalInTraining(p.display().to_string()));
        }
        Ok(out)
    }
}

/// Supported folder layouts of real radiograph datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XrayLayout {
    /// `{train,test}/{NORMAL,PNEUMONIA}`.
    Zhanglab,
    /// `{train,test}/{normal,abnormal}`.
    ChexpertFolders,
}

impl XrayLayout {
    pub fn class_dirs(self) -> (&'static str, &'static str) {
        match self {
            XrayLayout::Zhanglab => ("NORMAL", "PNEUMONIA"),
            XrayLayout::ChexpertFolders => ("normal", "abnormal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub layout: XrayLayout,
    /// Overrides the layout's class folder names.
    pub normal_dir: Option<String>,
    pub abnormal_dir: Option<String>,
    /// Validation images carved out of the training folders, per class.
    pub val_normal: usize,
    pub val_abnormal: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { layout: XrayLayout::Zhanglab, normal_dir: None, abnormal_dir: None, val_normal: 100, val_abnormal: 100, size: 128, seed: 0 }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| SquidError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|x| x.to_str()).is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str())))
        .collect();
    out.sort();
    Ok(out)
}

/// Lists `dir/<normal>` and `dir/<abnormal>`; neither may be empty.
pub fn ingest_class_folders(dir: &Path, normal: &str, abnormal: &str) -> Result<Vec<(PathBuf, bool)>> {
    let mut out = Vec::new();
    for (name, label) in [(normal, false), (abnormal, true)] {
        let files = list_images(&dir.join(name))?;
        if files.is_empty() {
            return Err(SquidError::InvalidArgument(format!("class folder {} holds no images", dir.join(name).display())));
        }
        out.extend(files.into_iter().map(|p| (p, label)));
    }
    Ok(out)
}

/// Discovered radiograph splits; `dropped_abnormal` counts training-folder
/// abnormal images that were neither used for validation nor training.
#[derive(Debug, Clone, PartialEq)]
pub struct XrayManifest {
    pub files: SplitFiles,
    pub dropped_abnormal: usize,
}

/// Discovers a two-class radiograph dataset under `root`.
///
/// Validation images are drawn at random from the training folders; the
/// remaining normal training images form the (normal-only) training split.
pub fn ingest_xray_folder(root: &Path, cfg: &IngestConfig) -> Result<XrayManifest> {
    let (n, a) = cfg.layout.class_dirs();
    let (n, a) = (cfg.normal_dir.as_deref().unwrap_or(n), cfg.abnormal_dir.as_deref().unwrap_or(a));
    let pool = ingest_class_folders(&root.join("train"), n, a)?;
    let test = ingest_class_folders(&root.join("test"), n, a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut normals, mut abnormals): (Vec<_>, Vec<_>) = pool.into_iter().partition(|(_, l)| !l);
    normals.shuffle(&mut rng);
    abnormals.shuffle(&mut rng);
    if normals.len() <= cfg.val_normal || abnormals.len() < cfg.val_abnormal {
        return Err(SquidError::InvalidArgument(format!(
            "training folders hold {} normal / {} abnormal images, too few for a {}/{} validation split",
            normals.len(),
            abnormals.len(),
            cfg.val_normal,
            cfg.val_abnormal
        )));
    }
    let mut val: Vec<_> = normals.drain(..cfg.val_normal).chain(abnormals.drain(..cfg.val_abnormal)).collect();
    val.sort();
    normals.sort();
    let dropped_abnormal = abnormals.len();
    log::info!(
        "ingested {}: train {} normal, val {}, test {}, dropped {} abnormal training images",
        root.display(),
        normals.len(),
        val.len(),
        test.len(),
        dropped_abnormal
    );
    Ok(XrayManifest { files: SplitFiles { train: normals, val, test }, dropped_abnormal })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, rgb: bool) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        if rgb {
            image::RgbImage::from_pixel(40, 30, image::Rgb([255, 0, 0])).save(path).unwrap();
        } else {
            image::GrayImage::from_pixel(40, 30, image::Luma([128])).save(path).unwrap();
        }
    }

    #[test]
    fn rgb_is_converted_and_resized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, true);
        let px = load_gray(&p, 128).unwrap();
        assert_eq!(px.len(), 128 * 128);
        assert!(px.iter().all(|&v| (v - px[0]).abs() < 1e-6 && v > 0.0 && v < 1.0));
        let set = LabelledImages::load(&[(p, false)], 128).unwrap();
        assert_eq!(set.images.size(), vec![1, 1, 128, 128]);
    }

    #[test]
    fn class_folders_are_labelled() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_png(&dir.path().join(format!("normal/{i}.png")), false);
        }
        for i in 0..2 {
            write_png(&dir.path().join(format!("abnormal/{i}.jpg")), false);
        }
        std::fs::write(dir.path().join("normal/notes.txt"), "x").unwrap();
        let items = ingest_class_folders(dir.path(), "normal", "abnormal").unwrap();
        assert_eq!(items.len(), 5);
        assert_eq!(items.iter().filter(|(_, l)| *l).count(), 2);
    }

    #[test]
    fn empty_class_folder_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("normal/0.png"), false);
        std::fs::create_dir_all(dir.path().join("abnormal")).unwrap();
        assert!(ingest_class_folders(dir.path(), "normal", "abnormal").is_err());
    }

    #[test]
    fn zhanglab_training_split_is_normal_only() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            write_png(&dir.path().join(format!("train/NORMAL/{i}.png")), false);
        }
        for i in 0..5 {
            write_png(&dir.path().join(format!("train/PNEUMONIA/{i}.png")), false);
        }
        for (c, n) in [("NORMAL", 2), ("PNEUMONIA", 3)] {
            for i in 0..n {
                write_png(&dir.path().join(format!("test/{c}/{i}.png")), true);
            }
        }
        let cfg = IngestConfig { val_normal: 2, val_abnormal: 2, ..Default::default() };
        let m = ingest_xray_folder(dir.path(), &cfg).unwrap();
        assert_eq!(m.files.train.len(), 4);
        assert!(m.files.train.iter().all(|(_, l)| !l));
        assert_eq!(m.files.val.iter().filter(|(_, l)| *l).count(), 2);
        assert_eq!(m.files.test.len(), 5);
        assert_eq!(m.dropped_abnormal, 3);
        assert_eq!(ingest_xray_folder(dir.path(), &cfg).unwrap(), m);
    }
}
