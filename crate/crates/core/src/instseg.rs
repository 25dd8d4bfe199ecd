//! Panicle superpixel detection and density-aware greedy clustering.
//!
//! A superpixel is a panicle superpixel when the mean detection probability
//! over its pixels reaches `alpha`. Panicle superpixels then start as
//! singleton clusters and adjacent clusters are merged greedily, always
//! taking the merge with the most negative fitness change, until no merge
//! lowers the total fitness. The fitness of a cluster with `n` pixels,
//! density mass `d` and summed per-feature variance `var` over the pixel
//! features `[γ·row, γ·col, r, g, b]` is `n·(δ·(d − β)² + var)`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::RasterGrid;
use crate::slic::SuperpixelMap;

pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessParams {
    pub gamma: f64,
    pub delta: f64,
    pub beta: f64,
}

impl Default for FitnessParams {
    fn default() -> Self {
        Self { gamma: 10.0, delta: 46775.0, beta: 1.0 }
    }
}

impl FitnessParams {
    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.delta > 0.0 && self.beta > 0.0) {
            bail!(Parameter, "gamma, delta and beta must be positive");
        }
        Ok(())
    }
}

/// Detected panicle superpixels with their mean detection probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanicleSuperpixels {
    pub ids: Vec<u32>,
    pub probabilities: Vec<f64>,
    pub alpha: f64,
}

impl PanicleSuperpixels {
    pub fn contains(&self, id: u32) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_raster(name: &str, grid: &RasterGrid, spmap: &SuperpixelMap, channels: usize) -> Result<()> {
    if (grid.height(), grid.width()) != (spmap.height(), spmap.width()) || grid.channels() != channels {
        bail!(
            Shape,
            "{name} is {:?}, expected {}x{}x{channels}",
            grid.shape(),
            spmap.height(),
            spmap.width()
        );
    }
    Ok(())
}

/// Mean detection probability of every superpixel.
pub fn superpixel_probabilities(detection: &RasterGrid, spmap: &SuperpixelMap) -> Result<Vec<f64>> {
    check_raster("detection map", detection, spmap, 1)?;
    let mut sum = vec![0.0; spmap.len()];
    let mut count = vec![0usize; spmap.len()];
    for (&l, &d) in spmap.labels().iter().zip(detection.data()) {
        sum[l as usize] += d;
        count[l as usize] += 1;
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// `P = { p : mean(D over p) ≥ alpha }`.
pub fn detect_superpixels(detection: &RasterGrid, spmap: &SuperpixelMap, alpha: f64) -> Result<PanicleSuperpixels> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!(Parameter, "alpha must lie in (0, 1), got {alpha}");
    }
    let probs = superpixel_probabilities(detection, spmap)?;
    let (ids, probabilities) = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= alpha)
        .map(|(k, &p)| (k as u32, p))
        .unzip();
    Ok(PanicleSuperpixels { ids, probabilities, alpha })
}

/// Nearest-neighbor upsampling of a low-resolution detection map.
pub fn upsample_detection(low: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    crate::grid::upsample_nearest(low, factor)
}

/// Nearest-neighbor upsampling of a density map, divided by `factor²` so the
/// total mass is unchanged.
pub fn upsample_density(low: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    let up = crate::grid::upsample_nearest(low, factor)?;
    Ok(up.scale(1.0 / (factor * factor) as f64))
}

/// Sufficient statistics of a pixel set for the fitness function.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct ClusterStats {
    n: f64,
    sum: [f64; 5],
    sum_sq: [f64; 5],
    mass: f64,
}

impl ClusterStats {
    fn merged(&self, other: &Self) -> Self {
        let mut out = *self;
        out.n += other.n;
        out.mass += other.mass;
        for k in 0..5 {
            out.sum[k] += other.sum[k];
            out.sum_sq[k] += other.sum_sq[k];
        }
        out
    }

    fn fitness(&self, params: &FitnessParams) -> f64 {
        let n = self.n;
        let var: f64 = (0..5)
            .map(|k| {
                let mean = self.sum[k] / n;
                (self.sum_sq[k] / n - mean * mean).max(0.0)
            })
            .sum();
        let dm = self.mass - params.beta;
        n * (params.delta * dm * dm + var)
    }
}

fn features(image: &RasterGrid, row: usize, col: usize, gamma: f64) -> [f64; 5] {
    let px = image.pixel(row, col);
    [gamma * row as f64, gamma * col as f64, px[0] * 255.0, px[1] * 255.0, px[2] * 255.0]
}

fn superpixel_stats(
    image: &RasterGrid,
    spmap: &SuperpixelMap,
    region: &RasterGrid,
    gamma: f64,
) -> Vec<ClusterStats> {
    let mut stats = vec![ClusterStats::default(); spmap.len()];
    let w = spmap.width();
    for (p, &l) in spmap.labels().iter().enumerate() {
        let (i, j) = (p / w, p % w);
        let v = features(image, i, j, gamma);
        let s = &mut stats[l as usize];
        s.n += 1.0;
        s.mass += region.data()[p];
        for k in 0..5 {
            s.sum[k] += v[k];
            s.sum_sq[k] += v[k] * v[k];
        }
    }
    stats
}

fn check_inputs(image: &RasterGrid, spmap: &SuperpixelMap, region: &RasterGrid) -> Result<()> {
    check_raster("image", image, spmap, 3)?;
    check_raster("region density", region, spmap, 1)
}

/// Fitness of the pixels covered by `cluster` (superpixel IDs), computed
/// directly from the pixels with population variances.
pub fn cluster_fitness(
    cluster: &[u32],
    image: &RasterGrid,
    spmap: &SuperpixelMap,
    region: &RasterGrid,
    params: &FitnessParams,
) -> Result<f64> {
    params.validate()?;
    check_inputs(image, spmap, region)?;
    if cluster.is_empty() {
        bail!(Parameter, "fitness of an empty cluster");
    }
    if let Some(&bad) = cluster.iter().find(|&&c| c as usize >= spmap.len()) {
        bail!(Annotation, "unknown superpixel {bad}");
    }
    let ids: BTreeSet<u32> = cluster.iter().copied().collect();
    let w = spmap.width();
    let pixels: Vec<usize> = (0..spmap.labels().len()).filter(|&p| ids.contains(&spmap.labels()[p])).collect();
    let n = pixels.len() as f64;
    let feats: Vec<[f64; 5]> = pixels.iter().map(|&p| features(image, p / w, p % w, params.gamma)).collect();
    let mut mean = [0.0; 5];
    for v in &feats {
        for k in 0..5 {
            mean[k] += v[k] / n;
        }
    }
    let var: f64 = feats
        .iter()
        .map(|v| (0..5).map(|k| (v[k] - mean[k]) * (v[k] - mean[k])).sum::<f64>())
        .sum::<f64>()
        / n;
    let d: f64 = pixels.iter().map(|&p| region.data()[p]).sum();
    Ok(n * (params.delta * (d - params.beta) * (d - params.beta) + var))
}

/// Superpixel → cluster ID, defined on the panicle superpixels only.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignment: BTreeMap<u32, u32>,
}

impl ClusterAssignment {
    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Cluster ID → member superpixels (both ascending).
    pub fn clusters(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut out: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&sp, &c) in &self.assignment {
            out.entry(c).or_default().push(sp);
        }
        out
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters().len()
    }

    /// Pixel indices of every cluster, in cluster-ID order.
    pub fn pixel_sets(&self, spmap: &SuperpixelMap) -> Vec<(u32, Vec<usize>)> {
        let clusters = self.clusters();
        let mut out: BTreeMap<u32, Vec<usize>> = clusters.keys().map(|&c| (c, Vec::new())).collect();
        for (p, &l) in spmap.labels().iter().enumerate() {
            if let Some(c) = self.assignment.get(&l) {
                out.get_mut(c).expect("cluster present").push(p);
            }
        }
        out.into_iter().collect()
    }
}

/// One accepted merge: `absorbed` joined `kept` with fitness change `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub kept: u32,
    pub absorbed: u32,
    pub delta: f64,
}

/// Greedy bottom-up clustering of the panicle superpixels.
pub fn segment_instances(
    panicles: &PanicleSuperpixels,
    image: &RasterGrid,
    spmap: &SuperpixelMap,
    region: &RasterGrid,
    params: &FitnessParams,
) -> Result<ClusterAssignment> {
    segment_instances_traced(panicles, image, spmap, region, params).map(|(a, _)| a)
}

/// [`segment_instances`] plus the sequence of merges it performed.
pub fn segment_instances_traced(
    panicles: &PanicleSuperpixels,
    image: &RasterGrid,
    spmap: &SuperpixelMap,
    region: &RasterGrid,
    params: &FitnessParams,
) -> Result<(ClusterAssignment, Vec<Merge>)> {
    params.validate()?;
    check_inputs(image, spmap, region)?;
    if let Some(&bad) = panicles.ids.iter().find(|&&c| c as usize >= spmap.len()) {
        bail!(Annotation, "unknown superpixel {bad}");
    }
    let in_p: BTreeSet<u32> = panicles.ids.iter().copied().collect();
    if in_p.is_empty() {
        return Ok((ClusterAssignment::default(), Vec::new()));
    }

    let sp_stats = superpixel_stats(image, spmap, region, params.gamma);
    let mut stats: BTreeMap<u32, (ClusterStats, f64)> = in_p
        .iter()
        .map(|&p| {
            let s = sp_stats[p as usize];
            (p, (s, s.fitness(params)))
        })
        .collect();
    let mut adj: BTreeMap<u32, BTreeSet<u32>> = in_p.iter().map(|&p| (p, BTreeSet::new())).collect();
    for (a, b) in spmap.adjacency() {
        if in_p.contains(&a) && in_p.contains(&b) {
            adj.get_mut(&a).unwrap().insert(b);
            adj.get_mut(&b).unwrap().insert(a);
        }
    }
    let mut assignment: BTreeMap<u32, u32> = in_p.iter().map(|&p| (p, p)).collect();
    let mut merges = Vec::new();

    loop {
        let mut best: Option<(f64, u32, u32)> = None;
        for (&c1, nbrs) in &adj {
            let (s1, f1) = &stats[&c1];
            for &c2 in nbrs.range(c1 + 1..) {
                let (s2, f2) = &stats[&c2];
                let delta = s1.merged(s2).fitness(params) - f1 - f2;
                if best.map_or(true, |(b, _, _)| delta < b) {
                    best = Some((delta, c1, c2));
                }
            }
        }
        let Some((delta, c1, c2)) = best else { break };
        if !(delta < 0.0) {
            break;
        }
        let merged = stats[&c1].0.merged(&stats[&c2].0);
        stats.insert(c1, (merged, merged.fitness(params)));
        stats.remove(&c2);
        let moved = adj.remove(&c2).unwrap_or_default();
        for n in moved {
            if n == c1 {
                continue;
            }
            let set = adj.get_mut(&n).unwrap();
            set.remove(&c2);
            set.insert(c1);
            adj.get_mut(&c1).unwrap().insert(n);
        }
        adj.get_mut(&c1).unwrap().remove(&c2);
        for c in assignment.values_mut() {
            if *c == c2 {
                *c = c1;
            }
        }
        merges.push(Merge { kept: c1, absorbed: c2, delta });
    }
    Ok((ClusterAssignment { assignment }, merges))
}

/// Sum of cluster fitness over an assignment.
pub fn total_fitness(
    assignment: &ClusterAssignment,
    image: &RasterGrid,
    spmap: &SuperpixelMap,
    region: &RasterGrid,
    params: &FitnessParams,
) -> Result<f64> {
    assignment
        .clusters()
        .values()
        .map(|members| cluster_fitness(members, image, spmap, region, params))
        .sum()
}

/// Connected components of the panicle superpixels; each cluster is named
/// after its smallest superpixel ID.
pub fn connected_components_segmentation(panicles: &PanicleSuperpixels, spmap: &SuperpixelMap) -> ClusterAssignment {
    let in_p: BTreeSet<u32> = panicles.ids.iter().copied().filter(|&p| (p as usize) < spmap.len()).collect();
    let neighbors = spmap.neighbors();
    let mut assignment = BTreeMap::new();
    for &start in &in_p {
        if assignment.contains_key(&start) {
            continue;
        }
        let mut stack = vec![start];
        assignment.insert(start, start);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p as usize] {
                if in_p.contains(&q) && !assignment.contains_key(&q) {
                    assignment.insert(q, start);
                    stack.push(q);
                }
            }
        }
    }
    ClusterAssignment { assignment }
}
