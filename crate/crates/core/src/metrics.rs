//! Segmentation evaluation: IoU (per pair, mean and cumulative), MAE and
//! maximum F-measure, plus a directory evaluator pairing files by stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::{load_mask_file, MaskFormat, SaliencyError, SaliencyMap};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BETA_SQUARED: f64 = 0.3;
pub const DEFAULT_F_THRESHOLDS: usize = 256;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction is {pred:?}, ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("files without a counterpart: {0:?}")]
    UnpairedFiles(Vec<String>),
    #[error("{path}: {source}")]
    Load { path: PathBuf, source: SaliencyError },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if pred.same_shape(gt) {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch { pred: (pred.width(), pred.height()), gt: (gt.width(), gt.height()) })
    }
}

/// Exact pixel counts behind an IoU value. Ground-truth pixels count as
/// foreground when they are at least 0.5.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

impl std::ops::Add for Overlap {
    type Output = Overlap;
    fn add(self, o: Overlap) -> Overlap {
        Overlap { intersection: self.intersection + o.intersection, union: self.union + o.union }
    }
}

pub fn overlap(pred: &SaliencyMap, gt: &SaliencyMap, tau: f64) -> Result<Overlap> {
    check(pred, gt)?;
    let mut o = Overlap::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let (a, b) = (p >= tau, g >= 0.5);
        o.intersection += (a && b) as u64;
        o.union += (a || b) as u64;
    }
    Ok(o)
}

/// IoU of the thresholded prediction against the ground truth; 1 when both are empty.
pub fn iou(pred: &SaliencyMap, gt: &SaliencyMap, tau: f64) -> Result<f64> {
    overlap(pred, gt, tau).map(|o| o.iou())
}

/// A prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub pred: SaliencyMap,
    pub gt: SaliencyMap,
}

impl EvalPair {
    pub fn new(pred: SaliencyMap, gt: SaliencyMap) -> Result<Self> {
        check(&pred, &gt)?;
        Ok(Self { pred, gt })
    }
}

fn overlaps(pairs: &[EvalPair], tau: f64) -> Result<Vec<Overlap>> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    pairs.par_iter().map(|p| overlap(&p.pred, &p.gt, tau)).collect()
}

pub fn miou(pairs: &[EvalPair], tau: f64) -> Result<f64> {
    let o = overlaps(pairs, tau)?;
    Ok(o.iter().map(Overlap::iou).sum::<f64>() / o.len() as f64)
}

/// Total intersection over total union, accumulated over pairs.
pub fn ciou(pairs: &[EvalPair], tau: f64) -> Result<f64> {
    let o = overlaps(pairs, tau)?;
    Ok(o.into_iter().fold(Overlap::default(), |a, b| a + b).iou())
}

pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check(pred, gt)?;
    let n = pred.values().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred.values().iter().zip(gt.values()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / n as f64)
}

/// Threshold `k` of an `n`-step uniform sweep over `[0, 1]`.
pub fn sweep_threshold(k: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        k as f64 / (n - 1) as f64
    }
}

/// Maximum over `thresholds` uniform cut-offs of the weighted F-measure.
///
/// A pixel is predicted foreground when it lies strictly above the cut-off,
/// so an all-zero prediction selects nothing at any threshold. Thresholds
/// where precision or recall is zero or undefined score 0.
pub fn max_f_measure(pred: &SaliencyMap, gt: &SaliencyMap, beta_squared: f64, thresholds: usize) -> Result<f64> {
    check(pred, gt)?;
    let positives = gt.values().iter().filter(|&&g| g >= 0.5).count() as f64;
    let mut best = 0.0f64;
    for k in 0..thresholds {
        let t = sweep_threshold(k, thresholds);
        let (mut tp, mut predicted) = (0u64, 0u64);
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if p > t {
                predicted += 1;
                tp += (g >= 0.5) as u64;
            }
        }
        if predicted == 0 || positives == 0.0 || tp == 0 {
            continue;
        }
        let precision = tp as f64 / predicted as f64;
        let recall = tp as f64 / positives;
        let f = (1.0 + beta_squared) * precision * recall / (beta_squared * precision + recall);
        best = best.max(f);
    }
    Ok(best)
}

/// Metric settings for a dataset evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub beta_squared: f64,
    pub f_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_IOU_THRESHOLD, beta_squared: DEFAULT_BETA_SQUARED, f_thresholds: DEFAULT_F_THRESHOLDS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub name: String,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
    pub mae: f64,
    pub max_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub pairs: Vec<PairReport>,
    pub miou: f64,
    pub ciou: f64,
    pub mae: f64,
    pub max_f: f64,
}

/// Evaluates named pairs. Per-pair work runs in parallel; aggregates are
/// reduced in input order, so the report does not depend on scheduling.
pub fn evaluate(pairs: &[(String, EvalPair)], cfg: &EvalConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let rows: Vec<PairReport> = pairs
        .par_iter()
        .map(|(name, p)| {
            let o = overlap(&p.pred, &p.gt, cfg.iou_threshold)?;
            Ok(PairReport {
                name: name.clone(),
                iou: o.iou(),
                intersection: o.intersection,
                union: o.union,
                mae: mae(&p.pred, &p.gt)?,
                max_f: max_f_measure(&p.pred, &p.gt, cfg.beta_squared, cfg.f_thresholds)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let total = rows.iter().fold(Overlap::default(), |a, r| a + Overlap { intersection: r.intersection, union: r.union });
    Ok(EvalReport {
        config: *cfg,
        miou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        ciou: total.iou(),
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
        max_f: rows.iter().map(|r| r.max_f).sum::<f64>() / n,
        pairs: rows,
    })
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| MetricsError::Io { path: dir.to_owned(), source })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|source| MetricsError::Io { path: dir.to_owned(), source })?.path();
        if path.is_file() && MaskFormat::from_path(&path).is_some() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Loads prediction and ground-truth directories, pairing PNG/PGM files by
/// filename stem. Every file must have a counterpart.
pub fn load_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, EvalPair)>> {
    let preds = mask_files(pred_dir)?;
    let gts = mask_files(gt_dir)?;
    let unpaired: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("prediction {k}"))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("ground truth {k}")))
        .collect();
    if !unpaired.is_empty() {
        return Err(MetricsError::UnpairedFiles(unpaired));
    }
    let load = |p: &PathBuf| load_mask_file(p).map_err(|source| MetricsError::Load { path: p.clone(), source });
    preds
        .iter()
        .map(|(stem, p)| Ok((stem.clone(), EvalPair::new(load(p)?, load(&gts[stem])?)?)))
        .collect()
}
