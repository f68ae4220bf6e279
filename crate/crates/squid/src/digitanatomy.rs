//! DigitAnatomy: 3x3 grids of handwritten digits 1..9 in reading order, with
//! missing, misordered, flipped or novel (zero) digits as anomalies.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SquidError};

pub const DIGIT_SIDE: usize = 28;
pub const GRID_SIDE: usize = 3 * DIGIT_SIDE;
const DIGIT_PIXELS: usize = DIGIT_SIDE * DIGIT_SIDE;

/// A 28x28 grayscale digit, row-major, values in `[0, 1]`.
pub type Cell = Vec<f32>;

/// Digit instances grouped by class.
#[derive(Debug, Clone)]
pub struct DigitBank {
    classes: [Vec<Cell>; 10],
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| SquidError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| SquidError::MalformedArchive(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an IDX file, returning its dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], expected_dims: u8, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let bad = |m: String| SquidError::MalformedArchive(format!("{what}: {m}"));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(bad(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    if bytes[3] != expected_dims {
        return Err(bad(format!("expected {expected_dims} dimensions, found {}", bytes[3])));
    }
    let header = 4 + 4 * expected_dims as usize;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[4..header].chunks(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(bad(format!("payload has {} bytes, header promises {len}", bytes.len() - header)));
    }
    Ok((dims, &bytes[header..]))
}

impl DigitBank {
    /// Loads an IDX image/label pair (optionally gzip-compressed).
    pub fn load_idx(images: &Path, labels: &Path) -> Result<DigitBank> {
        let image_bytes = read_maybe_gz(images)?;
        let label_bytes = read_maybe_gz(labels)?;
        let (dims, pixels) = parse_idx(&image_bytes, 3, "images")?;
        let (ldims, labels) = parse_idx(&label_bytes, 1, "labels")?;
        if dims[1] != DIGIT_SIDE || dims[2] != DIGIT_SIDE {
            return Err(SquidError::MalformedArchive(format!("images are {}x{}, expected 28x28", dims[1], dims[2])));
        }
        if ldims[0] != dims[0] {
            return Err(SquidError::MalformedArchive(format!("{} images but {} labels", dims[0], ldims[0])));
        }
        let mut classes: [Vec<Cell>; 10] = Default::default();
        for (img, &label) in pixels.chunks(DIGIT_PIXELS).zip(labels) {
            if label > 9 {
                return Err(SquidError::MalformedArchive(format!("label {label} outside 0..=9")));
            }
            classes[label as usize].push(img.iter().map(|&p| p as f32 / 255.0).collect());
        }
        Self::from_classes(classes)
    }

    /// Loads from a directory holding `*images-idx3-ubyte[.gz]` and `*labels-idx1-ubyte[.gz]`.
    pub fn load(source: &Path) -> Result<DigitBank> {
        if !source.is_dir() {
            return Err(SquidError::io(source, std::io::Error::new(std::io::ErrorKind::NotFound, "digit archive directory not found")));
        }
        let find = |needle: &str| -> Result<PathBuf> {
            let mut hits: Vec<PathBuf> = std::fs::read_dir(source)
                .map_err(|e| SquidError::io(source, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.contains(needle)))
                .collect();
            hits.sort();
            hits.into_iter().next().ok_or_else(|| SquidError::io(source.join(needle), std::io::Error::new(std::io::ErrorKind::NotFound, "no matching archive file")))
        };
        Self::load_idx(&find("images-idx3-ubyte")?, &find("labels-idx1-ubyte")?)
    }

    pub fn from_classes(classes: [Vec<Cell>; 10]) -> Result<DigitBank> {
        let missing: Vec<u8> = (0..10u8).filter(|&c| classes[c as usize].is_empty()).collect();
        if !missing.is_empty() {
            return Err(SquidError::IncompleteBank(missing));
        }
        if classes.iter().flatten().any(|c| c.len() != DIGIT_PIXELS) {
            return Err(SquidError::MalformedArchive("every digit must be 28x28".into()));
        }
        Ok(DigitBank { classes })
    }

    pub fn instances(&self, class: u8) -> &[Cell] {
        &self.classes[class as usize]
    }

    fn pick(&self, class: u8, rng: &mut impl Rng) -> Cell {
        let pool = &self.classes[class as usize];
        pool[rng.gen_range(0..pool.len())].clone()
    }
}

/// What is drawn in one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellCondition {
    Normal,
    Missing,
    /// Another digit (1..=9) drawn in place of the expected one.
    Misorder(u8),
    Flipped,
    /// A zero, which never appears in a normal grid.
    Novel,
}

impl CellCondition {
    pub fn is_normal(&self) -> bool {
        matches!(self, CellCondition::Normal)
    }

    pub fn kind(&self) -> Option<AnomalyKind> {
        match self {
            CellCondition::Normal => None,
            CellCondition::Missing => Some(AnomalyKind::Missing),
            CellCondition::Misorder(_) => Some(AnomalyKind::Misorder),
            CellCondition::Flipped => Some(AnomalyKind::Flipped),
            CellCondition::Novel => Some(AnomalyKind::Novel),
        }
    }
}

impl fmt::Display for CellCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellCondition::Normal => f.write_str("normal"),
            CellCondition::Missing => f.write_str("missing"),
            CellCondition::Misorder(d) => write!(f, "misorder:{d}"),
            CellCondition::Flipped => f.write_str("flipped"),
            CellCondition::Novel => f.write_str("novel"),
        }
    }
}

impl FromStr for CellCondition {
    type Err = SquidError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SquidError::InvalidArgument(format!("unknown cell condition {s:?}"));
        Ok(match s {
            "normal" => CellCondition::Normal,
            "missing" => CellCondition::Missing,
            "flipped" => CellCondition::Flipped,
            "novel" => CellCondition::Novel,
            _ => {
                let d: u8 = s.strip_prefix("misorder:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if !(1..=9).contains(&d) {
                    return Err(bad());
                }
                CellCondition::Misorder(d)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    Missing,
    Misorder,
    Flipped,
    Novel,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [AnomalyKind::Missing, AnomalyKind::Misorder, AnomalyKind::Flipped, AnomalyKind::Novel];
}

/// Renders digit `index` (1..=9) under `condition`.
pub fn render_cell(index: u8, condition: CellCondition, bank: &DigitBank, rng: &mut impl Rng) -> Result<Cell> {
    if !(1..=9).contains(&index) {
        return Err(SquidError::InvalidArgument(format!("cell index {index} outside 1..=9")));
    }
    Ok(match condition {
        CellCondition::Normal => bank.pick(index, rng),
        CellCondition::Missing => vec![0.0; DIGIT_PIXELS],
        CellCondition::Misorder(d) => {
            if !(1..=9).contains(&d) {
                return Err(SquidError::InvalidArgument(format!("misorder digit {d} outside 1..=9")));
            }
            bank.pick(d, rng)
        }
        CellCondition::Flipped => {
            let mut c = bank.pick(index, rng);
            c.reverse();
            c
        }
        CellCondition::Novel => bank.pick(0, rng),
    })
}

/// An 84x84 grid image with the conditions that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitGridImage {
    pub pixels: Vec<f32>,
    pub conditions: [CellCondition; 9],
    pub abnormal: bool,
}

impl DigitGridImage {
    pub fn to_gray_image(&self) -> image::GrayImage {
        let bytes = self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(GRID_SIDE as u32, GRID_SIDE as u32, bytes).expect("grid buffer has 84x84 pixels")
    }
}

/// Places rendered cells so that digit `k` sits at row `(k-1)/3`, column `(k-1)%3`.
pub fn compose(cells: &[Cell]) -> Vec<f32> {
    let mut out = vec![0f32; GRID_SIDE * GRID_SIDE];
    for (k, cell) in cells.iter().enumerate() {
        let (r, c) = (k / 3, k % 3);
        for y in 0..DIGIT_SIDE {
            let dst = (r * DIGIT_SIDE + y) * GRID_SIDE + c * DIGIT_SIDE;
            out[dst..dst + DIGIT_SIDE].copy_from_slice(&cell[y * DIGIT_SIDE..(y + 1) * DIGIT_SIDE]);
        }
    }
    out
}

pub fn generate_image(conditions: &[CellCondition; 9], bank: &DigitBank, rng: &mut impl Rng) -> Result<DigitGridImage> {
    let cells = (1..=9u8).zip(conditions).map(|(i, &c)| render_cell(i, c, bank, rng)).collect::<Result<Vec<_>>>()?;
    Ok(DigitGridImage { pixels: compose(&cells), conditions: *conditions, abnormal: conditions.iter().any(|c| !c.is_normal()) })
}

/// Relative frequency of each anomaly kind among anomalous cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyMix {
    pub missing: f64,
    pub misorder: f64,
    pub flipped: f64,
    pub novel: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        AnomalyMix { missing: 0.25, misorder: 0.25, flipped: 0.25, novel: 0.25 }
    }
}

impl AnomalyMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.missing, self.misorder, self.flipped, self.novel]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SquidError::Config(format!("anomaly mix must be non-negative and sum to 1, got {w:?}")));
        }
        Ok(())
    }
}

impl FromStr for AnomalyMix {
    type Err = SquidError;

    /// Parses `missing=0.25,misorder=0.25,flipped=0.25,novel=0.25`; omitted kinds get 0.
    fn from_str(s: &str) -> Result<Self> {
        let mut mix = AnomalyMix { missing: 0.0, misorder: 0.0, flipped: 0.0, novel: 0.0 };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| SquidError::Config(format!("expected kind=weight, got {part:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| SquidError::Config(format!("bad weight in {part:?}")))?;
            match k.trim() {
                "missing" => mix.missing = v,
                "misorder" => mix.misorder = v,
                "flipped" => mix.flipped = v,
                "novel" => mix.novel = v,
                other => return Err(SquidError::Config(format!("unknown anomaly kind {other:?}"))),
            }
        }
        mix.validate()?;
        Ok(mix)
    }
}

/// Normal and abnormal image counts of one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub normal: usize,
    pub abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Training images are always normal.
    pub train_normal: usize,
    pub val: SplitCounts,
    pub test: SplitCounts,
    pub mix: AnomalyMix,
    /// Probability that a cell of an abnormal image is anomalous; grids that
    /// come out all-normal are redrawn.
    pub anomaly_cell_prob: f64,
    /// Redraw misorder digits equal to the expected one.
    pub distinct_misorder: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_normal: 2000,
            val: SplitCounts { normal: 100, abnormal: 100 },
            test: SplitCounts { normal: 200, abnormal: 200 },
            mix: AnomalyMix::default(),
            anomaly_cell_prob: 0.8,
            distinct_misorder: true,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if !(self.anomaly_cell_prob > 0.0 && self.anomaly_cell_prob <= 1.0) {
            return Err(SquidError::Config(format!("anomaly_cell_prob {} outside (0, 1]", self.anomaly_cell_prob)));
        }
        Ok(())
    }
}

/// Draws the conditions of an abnormal grid: at least one anomalous cell.
pub fn sample_abnormal_conditions(cfg: &GenConfig, rng: &mut impl Rng) -> Result<[CellCondition; 9]> {
    cfg.validate()?;
    let kinds = WeightedIndex::new(cfg.mix.weights()).map_err(|e| SquidError::Config(e.to_string()))?;
    loop {
        let mut grid = [CellCondition::Normal; 9];
        for (i, cell) in grid.iter_mut().enumerate() {
            if !rng.gen_bool(cfg.anomaly_cell_prob) {
                continue;
            }
            *cell = match AnomalyKind::ALL[kinds.sample(rng)] {
                AnomalyKind::Missing => CellCondition::Missing,
                AnomalyKind::Flipped => CellCondition::Flipped,
                AnomalyKind::Novel => CellCondition::Novel,
                AnomalyKind::Misorder => {
                    let index = i as u8 + 1;
                    let mut d = rng.gen_range(1..=9u8);
                    while cfg.distinct_misorder && d == index {
                        d = rng.gen_range(1..=9u8);
                    }
                    CellCondition::Misorder(d)
                }
            };
        }
        if grid.iter().any(|c| !c.is_normal()) {
            return Ok(grid);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the dataset root, e.g. `test/abnormal/IMG_02301.png`.
    pub path: PathBuf,
    pub split: Split,
    pub abnormal: bool,
    pub conditions: [CellCondition; 9],
    pub seed: u64,
    /// Random stream of this image under `seed`; equals its global index.
    pub stream: u64,
}

impl ManifestEntry {
    fn line(&self) -> String {
        let conds: Vec<String> = self.conditions.iter().map(ToString::to_string).collect();
        format!(
            "{} {} {} {}:{}",
            self.path.display(),
            if self.abnormal { "abnormal" } else { "normal" },
            conds.join(","),
            self.seed,
            self.stream
        )
    }

    fn parse(line: &str) -> Result<ManifestEntry> {
        let bad = || SquidError::InvalidArgument(format!("malformed manifest line {line:?}"));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [path, label, conds, seed] = fields.as_slice() else { return Err(bad()) };
        let abnormal = match *label {
            "normal" => false,
            "abnormal" => true,
            _ => return Err(bad()),
        };
        let conditions: Vec<CellCondition> = conds.split(',').map(str::parse).collect::<Result<_>>()?;
        let conditions: [CellCondition; 9] = conditions.try_into().map_err(|_| bad())?;
        let (seed, stream) = seed.split_once(':').ok_or_else(bad)?;
        let path = PathBuf::from(path);
        let split = match path.components().next().and_then(|c| c.as_os_str().to_str()) {
            Some("train") => Split::Train,
            Some("val") => Split::Val,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        Ok(ManifestEntry { path, split, abnormal, conditions, seed: seed.parse().map_err(|_| bad())?, stream: stream.parse().map_err(|_| bad())? })
    }
}

/// Every image of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read(root: &Path) -> Result<DatasetManifest> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| SquidError::io(&path, e))?;
        let entries = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(ManifestEntry::parse).collect::<Result<_>>()?;
        Ok(DatasetManifest { root: root.to_path_buf(), entries })
    }

    fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut text = String::from("# path label conditions seed:stream\n");
        for e in &self.entries {
            text.push_str(&e.line());
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| SquidError::io(&path, e))
    }
}

/// The generator for the image with global index `stream`.
pub fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates and writes one image; its randomness depends only on `(seed, stream)`.
pub fn generate_entry(cfg: &GenConfig, bank: &DigitBank, split: Split, abnormal: bool, stream: u64) -> Result<(ManifestEntry, DigitGridImage)> {
    let mut rng = image_rng(cfg.seed, stream);
    let conditions = if abnormal { sample_abnormal_conditions(cfg, &mut rng)? } else { [CellCondition::Normal; 9] };
    let image = generate_image(&conditions, bank, &mut rng)?;
    let class = if abnormal { "abnormal" } else { "normal" };
    let path = PathBuf::from(split.name()).join(class).join(format!("IMG_{stream:05}.png"));
    Ok((ManifestEntry { path, split, abnormal, conditions, seed: cfg.seed, stream }, image))
}

/// Writes `<out>/{train,val,test}/{normal,abnormal}/IMG_xxxxx.png` and `<out>/manifest.txt`.
pub fn generate_dataset(cfg: &GenConfig, bank: &DigitBank, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let plan = [
        (Split::Train, false, cfg.train_normal),
        (Split::Val, false, cfg.val.normal),
        (Split::Val, true, cfg.val.abnormal),
        (Split::Test, false, cfg.test.normal),
        (Split::Test, true, cfg.test.abnormal),
    ];
    let mut entries = Vec::new();
    let mut stream = 0u64;
    for (split, abnormal, count) in plan {
        let dir = out.join(split.name()).join(if abnormal { "abnormal" } else { "normal" });
        std::fs::create_dir_all(&dir).map_err(|e| SquidError::io(&dir, e))?;
        for _ in 0..count {
            let (entry, image) = generate_entry(cfg, bank, split, abnormal, stream)?;
            let path = out.join(&entry.path);
            image.to_gray_image().save_with_format(&path, image::ImageFormat::Png)?;
            entries.push(entry);
            stream += 1;
        }
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), entries };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Class `c` instances are constant images of value `(c + 1) / 10`, plus
    /// one asymmetric instance so flips are observable.
    pub(crate) fn toy_bank() -> DigitBank {
        let classes: [Vec<Cell>; 10] = std::array::from_fn(|c| {
            let v = (c as f32 + 1.0) / 10.0;
            let mut ramp = vec![0.0; DIGIT_PIXELS];
            ramp[0] = v;
            vec![vec![v; DIGIT_PIXELS], ramp]
        });
        DigitBank::from_classes(classes).unwrap()
    }

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend(payload);
        b
    }

    #[test]
    fn loads_gzipped_and_raw_idx() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let n = 10u32;
        let pixels: Vec<u8> = (0..n as usize * DIGIT_PIXELS).map(|i| (i % 256) as u8).collect();
        let labels: Vec<u8> = (0..n as u8).collect();
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), idx_bytes(&[n, 28, 28], &pixels)).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_bytes(&[n], &labels)).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
        let bank = DigitBank::load(dir.path()).unwrap();
        for c in 0..10 {
            assert_eq!(bank.instances(c).len(), 1);
            assert_eq!(bank.instances(c)[0].len(), DIGIT_PIXELS);
        }
        assert!(bank.instances(3).iter().flatten().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(bank.instances(0)[0][255], 1.0);
    }

    #[test]
    fn single_class_archive_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("images-idx3-ubyte"), idx_bytes(&[2, 28, 28], &[0; 2 * DIGIT_PIXELS])).unwrap();
        std::fs::write(dir.path().join("labels-idx1-ubyte"), idx_bytes(&[2], &[7, 7])).unwrap();
        match DigitBank::load(dir.path()) {
            Err(SquidError::IncompleteBank(missing)) => assert_eq!(missing, vec![0, 1, 2, 3, 4, 5, 6, 8, 9]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_missing_archives() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DigitBank::load(&dir.path().join("nope")), Err(SquidError::Io { .. })));
        std::fs::write(dir.path().join("images-idx3-ubyte"), idx_bytes(&[2, 28, 28], &[0; 10])).unwrap();
        std::fs::write(dir.path().join("labels-idx1-ubyte"), idx_bytes(&[2], &[1, 2])).unwrap();
        assert!(matches!(DigitBank::load(dir.path()), Err(SquidError::MalformedArchive(_))));
    }

    #[test]
    fn render_conditions() {
        let bank = toy_bank();
        let mut rng = image_rng(0, 0);
        assert!(render_cell(4, CellCondition::Missing, &bank, &mut rng).unwrap().iter().all(|&p| p == 0.0));
        let novel = render_cell(4, CellCondition::Novel, &bank, &mut rng).unwrap();
        assert!(bank.instances(0).contains(&novel));
        let mis = render_cell(4, CellCondition::Misorder(7), &bank, &mut rng).unwrap();
        assert!(bank.instances(7).contains(&mis));
        let flipped = render_cell(4, CellCondition::Flipped, &bank, &mut image_rng(0, 1)).unwrap();
        let normal = render_cell(4, CellCondition::Normal, &bank, &mut image_rng(0, 1)).unwrap();
        let mut back = flipped.clone();
        back.reverse();
        assert_eq!(back, normal);
        assert!(render_cell(0, CellCondition::Normal, &bank, &mut rng).is_err());
    }

    #[test]
    fn flipping_reverses_both_axes() {
        let mut cell: Cell = (0..DIGIT_PIXELS).map(|i| i as f32).collect();
        let orig = cell.clone();
        cell.reverse();
        for y in 0..DIGIT_SIDE {
            for x in 0..DIGIT_SIDE {
                assert_eq!(cell[y * DIGIT_SIDE + x], orig[(DIGIT_SIDE - 1 - y) * DIGIT_SIDE + (DIGIT_SIDE - 1 - x)]);
            }
        }
    }

    #[test]
    fn normal_grid_places_digits_in_reading_order() {
        let bank = toy_bank();
        let mut rng = image_rng(0, 0);
        let img = generate_image(&[CellCondition::Normal; 9], &bank, &mut rng).unwrap();
        assert!(!img.abnormal);
        assert_eq!(img.pixels.len(), GRID_SIDE * GRID_SIDE);
        for k in 1..=9usize {
            let (r, c) = ((k - 1) / 3, (k - 1) % 3);
            let v = img.pixels[(r * DIGIT_SIDE) * GRID_SIDE + c * DIGIT_SIDE];
            assert_eq!(v, (k as f32 + 1.0) / 10.0);
        }
    }

    #[test]
    fn labels_follow_conditions() {
        let bank = toy_bank();
        let mut conds = [CellCondition::Normal; 9];
        conds[4] = CellCondition::Misorder(2);
        assert!(generate_image(&conds, &bank, &mut image_rng(1, 0)).unwrap().abnormal);
        let blank = generate_image(&[CellCondition::Missing; 9], &bank, &mut image_rng(1, 0)).unwrap();
        assert!(blank.abnormal);
        assert!(blank.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn condition_tokens_round_trip() {
        for c in [CellCondition::Normal, CellCondition::Missing, CellCondition::Misorder(3), CellCondition::Flipped, CellCondition::Novel] {
            assert_eq!(c.to_string().parse::<CellCondition>().unwrap(), c);
        }
        assert!("misorder:0".parse::<CellCondition>().is_err());
        assert!("weird".parse::<CellCondition>().is_err());
    }

    #[test]
    fn mix_parsing() {
        let m: AnomalyMix = "missing=0.25,misorder=0.25,flipped=0.25,novel=0.25".parse().unwrap();
        assert_eq!(m, AnomalyMix::default());
        let only: AnomalyMix = "missing=1".parse().unwrap();
        assert_eq!(only.weights(), [1.0, 0.0, 0.0, 0.0]);
        assert!("missing=0.5".parse::<AnomalyMix>().is_err());
        assert!("holes=1".parse::<AnomalyMix>().is_err());
    }

    #[test]
    fn abnormal_grids_have_an_anomaly_and_grounded_misorders() {
        let cfg = GenConfig { anomaly_cell_prob: 0.05, ..Default::default() };
        let mut rng = image_rng(3, 0);
        for _ in 0..500 {
            let g = sample_abnormal_conditions(&cfg, &mut rng).unwrap();
            assert!(g.iter().any(|c| !c.is_normal()));
            for (i, c) in g.iter().enumerate() {
                if let CellCondition::Misorder(d) = c {
                    assert_ne!(*d as usize, i + 1);
                }
            }
        }
    }

    #[test]
    fn generated_image_is_block_composition_of_cells() {
        let bank = toy_bank();
        let cfg = GenConfig::default();
        let (entry, img) = generate_entry(&cfg, &bank, Split::Test, true, 17).unwrap();
        let mut rng = image_rng(cfg.seed, 17);
        let conds = sample_abnormal_conditions(&cfg, &mut rng).unwrap();
        assert_eq!(conds, entry.conditions);
        let cells: Vec<Cell> = (1..=9u8).zip(&conds).map(|(i, &c)| render_cell(i, c, &bank, &mut rng).unwrap()).collect();
        assert_eq!(compose(&cells), img.pixels);
    }

    #[test]
    fn manifest_lines_round_trip() {
        let bank = toy_bank();
        let (entry, _) = generate_entry(&GenConfig::default(), &bank, Split::Val, true, 5).unwrap();
        assert_eq!(ManifestEntry::parse(&entry.line()).unwrap(), entry);
    }
}
