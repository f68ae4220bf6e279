//! Score calibration, anomaly scores and ranking/threshold metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Result, SquidError};
use crate::model::Squid;

/// Statistics of raw discriminator outputs over normal training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub mu: f64,
    pub sigma: f64,
    /// `+1` or `-1`; multiplies the standardised output before the sigmoid.
    pub polarity: f64,
    /// Number of raw outputs the statistics were computed from.
    pub samples: usize,
}

impl Calibration {
    /// Mean and sample standard deviation of `raw`, polarity `+1`.
    pub fn from_raw(raw: &[f64]) -> Result<Calibration> {
        if raw.is_empty() {
            return Err(SquidError::Empty("calibration sample"));
        }
        if raw.iter().any(|d| !d.is_finite()) {
            return Err(SquidError::InvalidArgument("non-finite discriminator output".into()));
        }
        let n = raw.len() as f64;
        let mu = raw.iter().sum::<f64>() / n;
        let var = if raw.len() > 1 { raw.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let sigma = var.sqrt();
        if !(sigma > 0.0) {
            return Err(SquidError::DegenerateCalibration);
        }
        Ok(Calibration { mu, sigma, polarity: 1.0, samples: raw.len() })
    }

    /// Anomaly score `sigmoid(polarity * (d - mu) / sigma)`.
    pub fn score(&self, d: f64) -> f64 {
        sigmoid(self.polarity * (d - self.mu) / self.sigma)
    }

    pub fn scores(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|&d| self.score(d)).collect()
    }

    /// Chooses the polarity so that labelled validation scores rank abnormal
    /// images higher, i.e. validation AUC is at least one half.
    pub fn orient(mut self, val_raw: &[f64], val_labels: &[bool]) -> Result<Calibration> {
        self.polarity = 1.0;
        if roc_auc(&self.scores(val_raw), val_labels)? < 0.5 {
            self.polarity = -1.0;
        }
        Ok(self)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Calibrates on raw outputs of up to `cap` training images.
pub fn calibrate(model: &mut Squid, train_images: &Tensor, cap: Option<usize>) -> Result<Calibration> {
    let n = train_images.size()[0] as usize;
    if n == 0 {
        return Err(SquidError::Empty("training set"));
    }
    let take = cap.map_or(n, |c| c.min(n)) as i64;
    Calibration::from_raw(&model.raw_scores(&train_images.narrow(0, 0, take))?)
}

/// Calibrated anomaly scores for a batch of images.
pub fn anomaly_scores(model: &mut Squid, images: &Tensor, cal: Option<&Calibration>) -> Result<(Vec<f64>, Vec<f64>)> {
    let cal = cal.ok_or(SquidError::Uncalibrated)?;
    let raw = model.raw_scores(images)?;
    let scores = cal.scores(&raw);
    Ok((raw, scores))
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(SquidError::shape(format!("{} labels", scores.len()), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SquidError::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SquidError::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random abnormal (`true`) sample outscores a random normal one, ties counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let idx = ascending(scores);
    // Twice the Mann-Whitney U statistic, kept integral so tie handling is exact.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice_u += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one step per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut idx = ascending(scores);
    idx.reverse();
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Samples scoring at or above `threshold` are predicted abnormal.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn sensitivity(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        Self::ratio(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Thresholded metrics at one operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub acc: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl OperatingPoint {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> OperatingPoint {
        let c = Confusion::at(scores, labels, threshold);
        OperatingPoint { threshold, acc: c.accuracy(), f1: c.f1(), sensitivity: c.sensitivity(), specificity: c.specificity() }
    }

    /// The distinct score that maximises F1 when used as threshold (lowest such score on ties).
    pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
        check_scores(scores, labels)?;
        let mut candidates: Vec<f64> = scores.to_vec();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best = OperatingPoint::at(scores, labels, candidates[0]);
        for &t in &candidates[1..] {
            let p = OperatingPoint::at(scores, labels, t);
            if p.f1 > best.f1 {
                best = p;
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    /// Metrics at the configured threshold.
    pub at_threshold: OperatingPoint,
    pub best_f1: OperatingPoint,
    pub roc: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
        Ok(EvalReport {
            auc: roc_auc(scores, labels)?,
            at_threshold: OperatingPoint::at(scores, labels, threshold),
            best_f1: OperatingPoint::best_f1(scores, labels)?,
            roc: roc_curve(scores, labels)?,
        })
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let row = |w: &mut csv::Writer<std::fs::File>, name: &str, p: &OperatingPoint| {
            w.write_record([name, &p.threshold.to_string(), &self.auc.to_string(), &p.acc.to_string(), &p.f1.to_string(), &p.sensitivity.to_string(), &p.specificity.to_string()])
        };
        let res = (|| -> csv::Result<()> {
            w.write_record(["operating_point", "threshold", "auc", "acc", "f1", "sensitivity", "specificity"])?;
            row(&mut w, "fixed", &self.at_threshold)?;
            row(&mut w, "best_f1", &self.best_f1)?;
            w.flush()?;
            Ok(())
        })();
        res.map_err(|e| csv_error(path, e))
    }

    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let res = (|| -> csv::Result<()> {
            w.write_record(["fpr", "tpr"])?;
            for (f, t) in &self.roc {
                w.write_record([f.to_string(), t.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })();
        res.map_err(|e| csv_error(path, e))
    }
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub path: String,
    /// `1` for abnormal, `0` for normal, empty when unknown.
    pub label: Option<u8>,
    pub raw_d: f64,
    pub score: f64,
}

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let res = (|| -> csv::Result<()> {
        for r in records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| SquidError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> SquidError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SquidError::io(path, io),
        other => SquidError::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}

/// Scores labelled images and summarises them.
pub fn evaluate(model: &mut Squid, cal: Option<&Calibration>, images: &Tensor, labels: &[bool], threshold: f64) -> Result<(EvalReport, Vec<f64>, Vec<f64>)> {
    if labels.is_empty() {
        return Err(SquidError::Empty("test set"));
    }
    let (raw, scores) = anomaly_scores(model, images, cal)?;
    Ok((EvalReport::from_scores(&scores, labels, threshold)?, raw, scores))
}

/// Mean nearest-pattern distance for the features routed to one memory region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDistance {
    pub region: usize,
    pub samples: usize,
    pub mean_nn_distance: f64,
}

/// For every region, the mean Euclidean distance from each feature assigned to it
/// (`features[i]` goes to `region_of[i]`) to the closest stored pattern of that region.
///
/// `patterns` is `[regions, slots, dim]`, `features` is `[n, dim]`.
pub fn memory_distribution_report(patterns: &Tensor, features: &Tensor, region_of: &[usize]) -> Result<Vec<RegionDistance>> {
    let ps = patterns.size();
    let fs = features.size();
    if ps.len() != 3 || ps[1] == 0 {
        return Err(SquidError::Empty("memory"));
    }
    if fs.len() != 2 || fs[1] != ps[2] || fs[0] as usize != region_of.len() {
        return Err(SquidError::shape(format!("[{}, {}] features", region_of.len(), ps[2]), format!("{fs:?}")));
    }
    let patterns = patterns.detach().to_kind(Kind::Double);
    let features = features.detach().to_kind(Kind::Double);
    (0..ps[0] as usize)
        .map(|region| {
            let rows: Vec<i64> = region_of.iter().enumerate().filter(|(_, &r)| r == region).map(|(i, _)| i as i64).collect();
            let mean_nn_distance = if rows.is_empty() {
                f64::NAN
            } else {
                let f = features.index_select(0, &Tensor::from_slice(&rows));
                let d = Tensor::cdist(&f, &patterns.get(region as i64), 2.0, None::<i64>);
                d.min_dim(1, false).0.mean(Kind::Double).double_value(&[])
            };
            Ok(RegionDistance { region, samples: rows.len(), mean_nn_distance })
        })
        .collect()
}
