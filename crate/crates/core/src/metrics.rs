//! Whole-image inference and segmentation metrics: confusion counts,
//! accuracy / sensitivity / specificity, ROC and its area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{model_forward, ModelParams};
use crate::patch::{extract_test_patches, make_test_grid, stitch, ProbabilityMap};
use crate::raster::{FovMask, Raster};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
/// Batch size used for inference.
pub const PREDICT_BATCH: usize = 32;

/// Grid, extract, forward in batches, stitch. Values lie in `[0, 1]`.
pub fn predict_image(image: &Raster, params: &ModelParams<f32>, patch: usize, stride: i64) -> Result<ProbabilityMap> {
    let grid = make_test_grid(image.height(), image.width(), patch, patch, stride)?;
    let patches = extract_test_patches(image, &grid)?;
    params.spec().check_input(patches.shape())?;
    let mut probs = Vec::with_capacity(patches.len());
    let n = grid.count();
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_BATCH).min(n);
        let (p, _) = model_forward(&patches.slice_batch(start, end), params)?;
        probs.extend_from_slice(p.data());
        start = end;
    }
    let probs = crate::nn::Tensor::from_vec(patches.shape(), probs)?;
    stitch(&probs, &grid)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// 0 when there are no positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// 0 when there are no negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn check_dims(probs: &ProbabilityMap, gt: &FovMask, fov: &FovMask) -> Result<()> {
    let want = (probs.width, probs.height);
    for (what, m) in [("ground truth", gt), ("FOV mask", fov)] {
        if (m.width(), m.height()) != want {
            return Err(Error::DimensionMismatch(format!(
                "{what} is {}x{}, probability map is {}x{}",
                m.width(),
                m.height(),
                want.0,
                want.1
            )));
        }
    }
    Ok(())
}

/// Counts over pixels with `fov == 1`; a pixel is predicted positive when `p ≥ threshold`.
pub fn confusion_at(probs: &ProbabilityMap, gt: &FovMask, fov: &FovMask, threshold: f32) -> Result<Confusion> {
    check_dims(probs, gt, fov)?;
    let mut c = Confusion::default();
    for ((&p, &g), &f) in probs.data.iter().zip(gt.data()).zip(fov.data()) {
        if f == 0 {
            continue;
        }
        match (p >= threshold, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `(score, label)` pairs for FOV pixels, in raster order.
pub fn fov_scores(probs: &ProbabilityMap, gt: &FovMask, fov: &FovMask) -> Result<(Vec<f32>, Vec<bool>)> {
    check_dims(probs, gt, fov)?;
    let mut scores = Vec::with_capacity(fov.count_ones());
    let mut labels = Vec::with_capacity(fov.count_ones());
    for ((&p, &g), &f) in probs.data.iter().zip(gt.data()).zip(fov.data()) {
        if f != 0 {
            scores.push(p);
            labels.push(g != 0);
        }
    }
    Ok((scores, labels))
}

/// ROC from a descending threshold sweep over distinct scores, and its trapezoidal area.
///
/// Equal scores flip together, so each tie group contributes one diagonal segment.
/// The area is accumulated in integer counts and divided once at the end.
pub fn roc_curve(scores: &[f32], labels: &[bool]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateClasses { positives: positives as usize, negatives: negatives as usize });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area in units of one positive × one negative
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = area2 as f64 / (2.0 * p * n);
    Ok((points, auc))
}

pub fn roc_auc(probs: &ProbabilityMap, gt: &FovMask, fov: &FovMask) -> Result<(Vec<(f64, f64)>, f64)> {
    let (scores, labels) = fov_scores(probs, gt, fov)?;
    roc_curve(&scores, &labels)
}

/// At most `max_points` points (at least 2), always keeping both ends.
pub fn thin_roc(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    let max_points = max_points.max(2);
    if points.len() <= max_points {
        return points.to_vec();
    }
    let last = points.len() - 1;
    let mut out: Vec<(f64, f64)> = (0..max_points - 1)
        .map(|k| points[k * last / (max_points - 1)])
        .collect();
    out.push(points[last]);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    pub threshold: f32,
}

impl MetricsReport {
    pub fn new(c: Confusion, roc: Vec<(f64, f64)>, auc: f64, threshold: f32) -> Self {
        Self {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            accuracy: c.accuracy(),
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            auc,
            roc,
            threshold,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }
}

/// One image ready for scoring.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub name: String,
    pub probs: ProbabilityMap,
    pub gt: FovMask,
    pub fov: FovMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f32,
    /// Score every pixel instead of only the FOV.
    pub include_border: bool,
    /// Cap on stored ROC points per report.
    pub max_roc_points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            include_border: false,
            max_roc_points: 1001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub fov_only: bool,
    /// Global confusion counts and ROC over the pooled pixels of every image.
    pub pooled: MetricsReport,
    pub images: Vec<ImageReport>,
}

/// Per-image reports plus a pooled report; images are pooled in the order given.
pub fn evaluate_scored(items: &[ScoredImage], opts: &EvalOptions) -> Result<DatasetReport> {
    let mut images = Vec::with_capacity(items.len());
    let mut pooled = Confusion::default();
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for it in items {
        let full;
        let fov = if opts.include_border {
            full = FovMask::full(it.probs.width, it.probs.height);
            &full
        } else {
            &it.fov
        };
        let c = confusion_at(&it.probs, &it.gt, fov, opts.threshold)?;
        let (scores, labels) = fov_scores(&it.probs, &it.gt, fov)?;
        let (roc, auc) = roc_curve(&scores, &labels)?;
        pooled.add(&c);
        all_scores.extend_from_slice(&scores);
        all_labels.extend_from_slice(&labels);
        images.push(ImageReport {
            name: it.name.clone(),
            metrics: MetricsReport::new(c, thin_roc(&roc, opts.max_roc_points), auc, opts.threshold),
        });
    }
    let (roc, auc) = roc_curve(&all_scores, &all_labels)?;
    Ok(DatasetReport {
        fov_only: !opts.include_border,
        pooled: MetricsReport::new(pooled, thin_roc(&roc, opts.max_roc_points), auc, opts.threshold),
        images,
    })
}
