//! Counting metrics and instance-segmentation scoring.
//!
//! Predicted and ground-truth instances are aligned one-to-one by the
//! Hungarian method on IoU before any IoU threshold is applied. Precision
//! and recall are pooled over all images of an operating point, and AP is
//! the area under the non-increasing precision envelope (all-point
//! interpolation).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::RasterGrid;
use crate::instseg::{detect_superpixels, segment_instances, FitnessParams};
use crate::slic::SuperpixelMap;

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        bail!(Parameter, "{} predictions for {} truths", preds.len(), truths.len());
    }
    Ok(preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Coefficient of determination about the truth mean.
pub fn r_squared(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.len() != truths.len() || preds.len() < 2 {
        bail!(Parameter, "{} predictions for {} truths", preds.len(), truths.len());
    }
    let mean = truths.iter().sum::<f64>() / truths.len() as f64;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        bail!(Degenerate, "truth values have zero variance");
    }
    let ss_res: f64 = preds.iter().zip(truths).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// A sorted, duplicate-free set of linear pixel indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelSet(Vec<usize>);

impl PixelSet {
    pub fn new(mut pixels: Vec<usize>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self(pixels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn intersection_len(&self, other: &PixelSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                core::cmp::Ordering::Less => i += 1,
                core::cmp::Ordering::Greater => j += 1,
                core::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

impl FromIterator<usize> for PixelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

pub fn instance_iou(a: &PixelSet, b: &PixelSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        bail!(Parameter, "IoU of an empty instance");
    }
    let inter = a.intersection_len(b);
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// Minimum-cost assignment on a row-major `rows × cols` matrix. Returns the
/// column assigned to each row; with more rows than columns some rows stay
/// unassigned.
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix shape");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        let by_col = solve_assignment(&t, cols, rows);
        let mut out = vec![None; rows];
        for (j, r) in by_col.into_iter().enumerate() {
            if let Some(i) = r {
                out[i] = Some(j);
            }
        }
        return out;
    }

    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel, rows and columns are 1-based.
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMatch {
    pub pred: u32,
    pub truth: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<InstanceMatch>,
    pub unmatched_preds: Vec<u32>,
    pub unmatched_truths: Vec<u32>,
}

impl MatchResult {
    /// Sum of matched IoU, added in ascending order.
    pub fn total_iou(&self) -> f64 {
        let mut v: Vec<f64> = self.matches.iter().map(|m| m.iou).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum()
    }

    pub fn true_positives(&self, threshold: f64) -> usize {
        self.matches.iter().filter(|m| m.iou >= threshold).count()
    }
}

/// Pairwise IoU, row-major with predictions as rows.
pub fn iou_matrix(preds: &[(u32, PixelSet)], truths: &[(u32, PixelSet)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(preds.len() * truths.len());
    for (_, p) in preds {
        for (_, t) in truths {
            out.push(instance_iou(p, t)?);
        }
    }
    Ok(out)
}

/// One-to-one matching of predicted to true instances that maximizes total
/// IoU. Pairs that end up with zero overlap are reported as unmatched.
pub fn hungarian_match(preds: &[(u32, PixelSet)], truths: &[(u32, PixelSet)]) -> Result<MatchResult> {
    let iou = iou_matrix(preds, truths)?;
    let cost: Vec<f64> = iou.iter().map(|v| -v).collect();
    let assignment = solve_assignment(&cost, preds.len(), truths.len());
    let mut result = MatchResult::default();
    let mut truth_used = vec![false; truths.len()];
    for (i, col) in assignment.into_iter().enumerate() {
        match col {
            Some(j) if iou[i * truths.len() + j] > 0.0 => {
                truth_used[j] = true;
                result.matches.push(InstanceMatch { pred: preds[i].0, truth: truths[j].0, iou: iou[i * truths.len() + j] });
            }
            _ => result.unmatched_preds.push(preds[i].0),
        }
    }
    result.unmatched_truths = truths.iter().zip(&truth_used).filter(|(_, &u)| !u).map(|(t, _)| t.0).collect();
    Ok(result)
}

/// Pooled detection counts at one `(alpha, beta)` operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub alpha: f64,
    pub beta: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    /// Precision is 0 when nothing was predicted.
    pub fn new(alpha: f64, beta: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        Self { alpha, beta, tp, fp, fn_, precision, recall }
    }
}

/// Area under the precision envelope: sweep recall in ascending order with
/// precision replaced by the best precision at any equal or higher recall.
pub fn average_precision(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut envelope = vec![0.0; pts.len()];
    let mut best = 0.0f64;
    for k in (0..pts.len()).rev() {
        best = best.max(pts[k].1);
        envelope[k] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in pts.iter().enumerate() {
        ap += (r - prev) * envelope[k];
        prev = r;
    }
    ap
}

/// The same area summed over distinct recall levels, each weighted by the
/// best precision reached at that recall or beyond.
pub fn average_precision_direct(points: &[(f64, f64)]) -> f64 {
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Everything needed to segment and score one image.
#[derive(Debug, Clone)]
pub struct SegmentationCase {
    pub image: RasterGrid,
    pub spmap: SuperpixelMap,
    /// Full-resolution detection probabilities.
    pub detection: RasterGrid,
    /// Full-resolution region density.
    pub region: RasterGrid,
    pub truth: Vec<PixelSet>,
}

impl SegmentationCase {
    /// Segments at `(alpha, beta)` and returns the predicted instances.
    pub fn segment(&self, alpha: f64, params: &FitnessParams) -> Result<Vec<(u32, PixelSet)>> {
        let p = detect_superpixels(&self.detection, &self.spmap, alpha)?;
        let clusters = segment_instances(&p, &self.image, &self.spmap, &self.region, params)?;
        Ok(clusters.pixel_sets(&self.spmap).into_iter().map(|(id, px)| (id, PixelSet::new(px))).collect())
    }

    pub fn score(&self, preds: &[(u32, PixelSet)]) -> Result<MatchResult> {
        let truths: Vec<(u32, PixelSet)> =
            self.truth.iter().enumerate().map(|(k, t)| (k as u32, t.clone())).collect();
        hungarian_match(preds, &truths)
    }
}

pub const DEFAULT_ALPHAS: [f64; 7] = [0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60];
pub const DEFAULT_BETAS: [f64; 5] = [0.6, 0.8, 1.0, 1.2, 1.4];

/// PR points over the `alphas × betas` grid and the resulting AP (the
/// single-class mAP).
pub fn pr_curve_and_map(
    cases: &[SegmentationCase],
    alphas: &[f64],
    betas: &[f64],
    iou_threshold: f64,
    base: &FitnessParams,
) -> Result<(Vec<PrPoint>, f64)> {
    if cases.iter().all(|c| c.truth.is_empty()) {
        bail!(Degenerate, "no ground-truth instances in any image");
    }
    let mut points = Vec::with_capacity(alphas.len() * betas.len());
    for &alpha in alphas {
        for &beta in betas {
            let params = base.with_beta(beta);
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for case in cases {
                let preds = case.segment(alpha, &params)?;
                let m = case.score(&preds)?;
                let hits = m.true_positives(iou_threshold);
                tp += hits;
                fp += preds.len() - hits;
                fn_ += case.truth.len() - hits;
            }
            points.push(PrPoint::new(alpha, beta, tp, fp, fn_));
        }
    }
    let pr: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    Ok((points, average_precision(&pr)))
}
