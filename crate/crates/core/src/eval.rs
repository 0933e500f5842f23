//! ROC, AUC and EER at frame, pixel and dual-pixel level.

use std::fmt::Write as _;

use ndarray::{Array3, ArrayView3, Axis};

use crate::error::{ensure_dim, Error, Result};

/// Fraction of a frame's anomaly pixels that must be detected, as `num/den`.
const COVERAGE: (usize, usize) = (4, 10);

/// Ground-truth masks, `T × H × W`, nonzero = anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub masks: Array3<u8>,
}

impl GroundTruth {
    pub fn new(masks: Array3<u8>) -> Self {
        GroundTruth { masks }
    }

    pub fn len(&self) -> usize {
        self.masks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_flags(&self) -> Vec<bool> {
        self.masks
            .outer_iter()
            .map(|m| m.iter().any(|&v| v != 0))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Level {
    Frame,
    Pixel,
    /// Minimum detection precision in percent.
    DualPixel(f64),
}

impl Level {
    pub fn name(&self) -> &'static str {
        match self {
            Level::Frame => "frame",
            Level::Pixel => "pixel",
            Level::DualPixel(_) => "dual-pixel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub level: Level,
    /// Ordered by decreasing threshold.
    pub roc: Vec<RocPoint>,
    /// Absent when either class is empty.
    pub auc: Option<f64>,
    pub eer: Option<f64>,
}

impl EvalReport {
    /// One `threshold,tpr,fpr` row per sweep point.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,tpr,fpr\n");
        for p in &self.roc {
            writeln!(out, "{},{},{}", p.threshold, p.tpr, p.fpr).expect("string write");
        }
        out
    }

    /// `level,auc,eer,alpha` with empty fields for absent values.
    pub fn summary_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let alpha = match self.level {
            Level::DualPixel(a) => a.to_string(),
            _ => String::new(),
        };
        format!("{},{},{},{}", self.level.name(), opt(self.auc), opt(self.eer), alpha)
    }
}

/// Sweep thresholds: `+∞`, distinct values descending, `−∞`.
fn sweep(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    let mut out = Vec::with_capacity(v.len() + 2);
    out.push(f64::INFINITY);
    out.extend(v);
    out.push(f64::NEG_INFINITY);
    out
}

/// Trapezoid area under points sorted by FPR then TPR.
pub fn trapezoid_auc(roc: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Rate where `FPR = 1 − TPR`, interpolated between the bracketing points.
pub fn equal_error_rate(roc: &[RocPoint]) -> Option<f64> {
    let g = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    for w in roc.windows(2) {
        let (g0, g1) = (g(&w[0]), g(&w[1]));
        if g0 == 0.0 {
            return Some(w[0].fpr);
        }
        if g0 < 0.0 && g1 >= 0.0 {
            let t = -g0 / (g1 - g0);
            return Some(w[0].fpr + t * (w[1].fpr - w[0].fpr));
        }
    }
    roc.last().filter(|p| g(p) == 0.0).map(|p| p.fpr)
}

fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn report(level: Level, roc: Vec<RocPoint>, positives: usize, negatives: usize) -> EvalReport {
    let defined = positives > 0 && negatives > 0;
    let auc = defined.then(|| trapezoid_auc(&roc));
    let eer = match level {
        Level::DualPixel(_) => None,
        _ if defined => equal_error_rate(&roc),
        _ => None,
    };
    EvalReport { level, roc, auc, eer }
}

/// A frame is flagged at threshold `τ` when its score is `≥ τ`.
pub fn frame_level(scores: &[f64], gt: &GroundTruth) -> Result<EvalReport> {
    frame_level_flags(scores, &gt.frame_flags())
}

pub fn frame_level_flags(scores: &[f64], flags: &[bool]) -> Result<EvalReport> {
    ensure_dim(scores.len() == flags.len(), || {
        format!("{} scores for {} ground-truth frames", scores.len(), flags.len())
    })?;
    let pos = flags.iter().filter(|&&f| f).count();
    let neg = flags.len() - pos;
    let roc = sweep(scores.iter().copied())
        .into_iter()
        .map(|tau| {
            let (mut tp, mut fp) = (0, 0);
            for (&s, &f) in scores.iter().zip(flags) {
                if s >= tau {
                    if f {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            RocPoint {
                threshold: tau,
                tpr: rate(tp, pos),
                fpr: rate(fp, neg),
            }
        })
        .collect();
    Ok(report(Level::Frame, roc, pos, neg))
}

/// Per-frame pixel scores, each sorted descending.
struct FrameStats {
    /// Scores of ground-truth pixels; empty on negative frames.
    truth: Vec<f64>,
    all: Vec<f64>,
}

/// Number of leading entries `≥ tau` in a descending slice.
fn count_at_least(sorted_desc: &[f64], tau: f64) -> usize {
    sorted_desc.partition_point(|&s| s >= tau)
}

impl FrameStats {
    fn new(scores: ndarray::ArrayView2<f64>, mask: ndarray::ArrayView2<u8>) -> Self {
        let desc = |mut v: Vec<f64>| {
            v.sort_by(|a, b| b.total_cmp(a));
            v
        };
        let truth = scores
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m != 0)
            .map(|(&s, _)| s)
            .collect();
        FrameStats {
            truth: desc(truth),
            all: desc(scores.iter().copied().collect()),
        }
    }

    fn is_positive(&self) -> bool {
        !self.truth.is_empty()
    }

    /// Largest threshold at which coverage holds.
    fn coverage_score(&self) -> f64 {
        let need = (COVERAGE.0 * self.truth.len()).div_ceil(COVERAGE.1);
        self.truth[need.max(1) - 1]
    }

    /// True positive on a positive frame, any detection on a negative frame.
    fn hit(&self, tau: f64, alpha: f64) -> bool {
        let detected = count_at_least(&self.all, tau);
        if !self.is_positive() {
            return detected > 0;
        }
        let inter = count_at_least(&self.truth, tau);
        COVERAGE.1 * inter >= COVERAGE.0 * self.truth.len()
            && 100.0 * inter as f64 >= alpha * detected as f64
    }
}

fn pixel_sweep(scores: ArrayView3<f64>, gt: &GroundTruth, level: Level) -> Result<EvalReport> {
    ensure_dim(scores.dim() == gt.masks.dim(), || {
        format!("score map {:?} vs masks {:?}", scores.dim(), gt.masks.dim())
    })?;
    let alpha = match level {
        Level::DualPixel(a) if !(0.0..=100.0).contains(&a) => {
            return Err(Error::InvalidArgument(format!("alpha {a} outside [0, 100]")))
        }
        Level::DualPixel(a) => a,
        _ => 0.0,
    };
    let frames: Vec<FrameStats> = crate::par::map_range(scores.dim().0, |t| {
        FrameStats::new(scores.index_axis(Axis(0), t), gt.masks.index_axis(Axis(0), t))
    });
    let pos = frames.iter().filter(|f| f.is_positive()).count();
    let neg = frames.len() - pos;
    // Pixel-level outcomes only change at these values.
    let taus = sweep(frames.iter().flat_map(|f| {
        let max = f.all.first().copied();
        let cover = f.is_positive().then(|| f.coverage_score());
        max.into_iter().chain(cover)
    }));
    let roc = crate::par::map(&taus, |&tau| {
        let (mut tp, mut fp) = (0, 0);
        for f in &frames {
            if f.hit(tau, alpha) {
                if f.is_positive() {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        RocPoint {
            threshold: tau,
            tpr: rate(tp, pos),
            fpr: rate(fp, neg),
        }
    });
    Ok(report(level, roc, pos, neg))
}

/// Pixels with score `≥ τ` are detections; a positive frame is a hit when
/// they cover at least 40% of its anomaly pixels.
pub fn pixel_level(scores: ArrayView3<f64>, gt: &GroundTruth) -> Result<EvalReport> {
    pixel_sweep(scores, gt, Level::Pixel)
}

/// Pixel-level coverage plus at least `alpha` percent of detected pixels
/// being anomalous.
pub fn dual_pixel_level(scores: ArrayView3<f64>, gt: &GroundTruth, alpha: f64) -> Result<EvalReport> {
    pixel_sweep(scores, gt, Level::DualPixel(alpha))
}
