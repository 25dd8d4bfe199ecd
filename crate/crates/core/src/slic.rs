//! SLIC superpixels and superpixel adjacency.
//!
//! Clustering runs in RGB (0–255 scale) so that the same color space serves
//! the cluster-fitness features downstream. After the k-means iterations
//! every label is split into its 4-connected components and any component
//! smaller than a quarter of the target size is folded into its largest
//! neighbor, so each final superpixel is connected.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{Dihedral, PixelCoord, RasterGrid};

/// The three superpixel granularities offered to annotators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuperpixelLevel {
    Small,
    Medium,
    Large,
}

impl SuperpixelLevel {
    pub const ALL: [SuperpixelLevel; 3] =
        [SuperpixelLevel::Small, SuperpixelLevel::Medium, SuperpixelLevel::Large];

    /// Mean superpixel area in pixels.
    pub fn target_size(self) -> usize {
        match self {
            SuperpixelLevel::Small => 30,
            SuperpixelLevel::Medium => 60,
            SuperpixelLevel::Large => 110,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SuperpixelLevel::Small => "small",
            SuperpixelLevel::Medium => "medium",
            SuperpixelLevel::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(SuperpixelLevel::Small),
            "medium" => Some(SuperpixelLevel::Medium),
            "large" => Some(SuperpixelLevel::Large),
            _ => None,
        }
    }
}

impl fmt::Display for SuperpixelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A partition of an image into labelled superpixels `0..n_superpixels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    n_superpixels: usize,
    level: Option<SuperpixelLevel>,
}

impl SuperpixelMap {
    /// Wraps a label grid, checking that labels are dense and non-empty.
    pub fn from_labels(
        height: usize,
        width: usize,
        labels: Vec<u32>,
        level: Option<SuperpixelLevel>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Shape, "{} labels for a {height}x{width} map", labels.len());
        }
        let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; n];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            bail!(Annotation, "superpixel label {missing} has no pixels");
        }
        Ok(Self { height, width, labels, n_superpixels: n, level })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.n_superpixels
    }

    pub fn is_empty(&self) -> bool {
        self.n_superpixels == 0
    }

    pub fn level(&self) -> Option<SuperpixelLevel> {
        self.level
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    #[inline]
    pub fn label_at(&self, p: PixelCoord) -> u32 {
        self.label(p.row, p.col)
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.n_superpixels];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    pub fn mean_area(&self) -> f64 {
        (self.height * self.width) as f64 / self.n_superpixels as f64
    }

    /// Linear pixel indices (`row * width + col`) of every superpixel.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_superpixels];
        for (k, &l) in self.labels.iter().enumerate() {
            members[l as usize].push(k);
        }
        members
    }

    /// True when every superpixel is a single 4-connected region.
    pub fn is_connected(&self) -> bool {
        let (_, n_components) = components(self.height, self.width, &self.labels);
        n_components == self.n_superpixels
    }

    /// Unordered pairs `(a, b)` with `a < b` of 4-adjacent superpixels.
    pub fn adjacency(&self) -> BTreeSet<(u32, u32)> {
        let mut pairs = BTreeSet::new();
        let (h, w) = (self.height, self.width);
        for i in 0..h {
            for j in 0..w {
                let a = self.label(i, j);
                if j + 1 < w {
                    let b = self.label(i, j + 1);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if i + 1 < h {
                    let b = self.label(i + 1, j);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
        pairs
    }

    /// Neighbor lists indexed by label.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_superpixels];
        for (a, b) in self.adjacency() {
            out[a as usize].push(b);
            out[b as usize].push(a);
        }
        out
    }

    /// The same partition seen through a dihedral symmetry.
    pub fn transform(&self, element: Dihedral) -> Self {
        let grid = RasterGrid::from_fn(self.height, self.width, 1, |i, j, _| {
            self.label(i, j) as f64
        });
        let t = crate::grid::dihedral_transform(&grid, element);
        let labels = t.data().iter().map(|&v| v as u32).collect();
        Self {
            height: t.height(),
            width: t.width(),
            labels,
            n_superpixels: self.n_superpixels,
            level: self.level,
        }
    }
}

/// Tunables for [`slic_segment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_size: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl SlicParams {
    pub fn new(target_size: usize) -> Self {
        Self { target_size, compactness: 10.0, iterations: 10 }
    }

    pub fn for_level(level: SuperpixelLevel) -> Self {
        Self::new(level.target_size())
    }
}

#[derive(Clone, Copy)]
struct Center {
    row: f64,
    col: f64,
    color: [f64; 3],
}

/// Segments a 3-channel image (RGB in `[0, 1]`) into superpixels of roughly
/// `params.target_size` pixels each.
pub fn slic_segment(image: &RasterGrid, params: &SlicParams) -> Result<SuperpixelMap> {
    let (h, w, c) = image.shape();
    if c != 3 {
        bail!(Shape, "SLIC needs an RGB image, got {c} channels");
    }
    if params.target_size == 0 {
        bail!(Parameter, "target superpixel size must be positive");
    }
    if !(params.compactness > 0.0) {
        bail!(Parameter, "compactness must be positive");
    }
    let n = h * w;
    if n < params.target_size || h == 0 || w == 0 {
        bail!(Shape, "{h}x{w} image is smaller than one {}-pixel seed cell", params.target_size);
    }

    let k = n.div_ceil(params.target_size);
    let rows = libm::round(libm::sqrt(k as f64 * h as f64 / w as f64)).clamp(1.0, h as f64) as usize;
    let cols = libm::round(k as f64 / rows as f64).clamp(1.0, w as f64) as usize;
    let step = libm::sqrt(n as f64 / (rows * cols) as f64);
    let spatial_weight = (params.compactness / step) * (params.compactness / step);

    let color = |p: usize| -> [f64; 3] {
        let px = &image.data()[p * 3..p * 3 + 3];
        [px[0] * 255.0, px[1] * 255.0, px[2] * 255.0]
    };

    let mut labels = vec![0u32; n];
    let mut centers = Vec::with_capacity(rows * cols);
    let cell_h = h as f64 / rows as f64;
    let cell_w = w as f64 / cols as f64;
    for a in 0..rows {
        for b in 0..cols {
            let row = (a as f64 + 0.5) * cell_h;
            let col = (b as f64 + 0.5) * cell_w;
            let p = (row as usize).min(h - 1) * w + (col as usize).min(w - 1);
            centers.push(Center { row, col, color: color(p) });
        }
    }
    for i in 0..h {
        let a = ((i as f64 / cell_h) as usize).min(rows - 1);
        for j in 0..w {
            let b = ((j as f64 / cell_w) as usize).min(cols - 1);
            labels[i * w + j] = (a * cols + b) as u32;
        }
    }

    let mut dist = vec![f64::INFINITY; n];
    let reach = libm::ceil(step) as isize;
    for _ in 0..params.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, ctr) in centers.iter().enumerate() {
            let r0 = (ctr.row as isize - reach).max(0) as usize;
            let r1 = ((ctr.row as isize + reach) as usize).min(h - 1);
            let c0 = (ctr.col as isize - reach).max(0) as usize;
            let c1 = ((ctr.col as isize + reach) as usize).min(w - 1);
            for i in r0..=r1 {
                let di = i as f64 - ctr.row;
                for j in c0..=c1 {
                    let p = i * w + j;
                    let px = color(p);
                    let dc = (px[0] - ctr.color[0]) * (px[0] - ctr.color[0])
                        + (px[1] - ctr.color[1]) * (px[1] - ctr.color[1])
                        + (px[2] - ctr.color[2]) * (px[2] - ctr.color[2]);
                    let dj = j as f64 - ctr.col;
                    let d = dc + (di * di + dj * dj) * spatial_weight;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }

        let mut acc = vec![[0.0f64; 6]; centers.len()];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let px = color(p);
                let a = &mut acc[labels[p] as usize];
                a[0] += i as f64;
                a[1] += j as f64;
                a[2] += px[0];
                a[3] += px[1];
                a[4] += px[2];
                a[5] += 1.0;
            }
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                ctr.row = a[0] / a[5];
                ctr.col = a[1] / a[5];
                ctr.color = [a[2] / a[5], a[3] / a[5], a[4] / a[5]];
            }
        }
    }

    let min_size = (params.target_size / 4).max(1);
    let labels = enforce_connectivity(h, w, &labels, min_size);
    SuperpixelMap::from_labels(h, w, labels, level_for(params.target_size))
}

fn level_for(target_size: usize) -> Option<SuperpixelLevel> {
    SuperpixelLevel::ALL.into_iter().find(|l| l.target_size() == target_size)
}

/// 4-connected components of equal labels, numbered in raster order.
fn components(h: usize, w: usize, labels: &[u32]) -> (Vec<u32>, usize) {
    const UNSEEN: u32 = u32::MAX;
    let mut comp = vec![UNSEEN; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if comp[start] != UNSEEN {
            continue;
        }
        let l = labels[start];
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == UNSEEN && labels[q] == l {
                    comp[q] = next;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        next += 1;
    }
    (comp, next as usize)
}

/// Splits labels into connected components and absorbs every component
/// below `min_size` into its largest neighbor. Output labels are dense and
/// numbered by first appearance in raster order.
fn enforce_connectivity(h: usize, w: usize, labels: &[u32], min_size: usize) -> Vec<u32> {
    let (comp, n) = components(h, w, labels);
    let mut size = vec![0usize; n];
    for &c in &comp {
        size[c as usize] += 1;
    }
    let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for i in 0..h {
        for j in 0..w {
            let a = comp[i * w + j];
            if j + 1 < w {
                let b = comp[i * w + j + 1];
                if a != b {
                    adj[a as usize].insert(b);
                    adj[b as usize].insert(a);
                }
            }
            if i + 1 < h {
                let b = comp[(i + 1) * w + j];
                if a != b {
                    adj[a as usize].insert(b);
                    adj[b as usize].insert(a);
                }
            }
        }
    }

    // parent[c] == c for live components; merged ones point at their host.
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut c: u32) -> u32 {
        while parent[c as usize] != c {
            let up = parent[parent[c as usize] as usize];
            parent[c as usize] = up;
            c = up;
        }
        c
    }

    // (size, id) ordered queue of live small components
    let mut small: BTreeSet<(usize, u32)> =
        (0..n as u32).filter(|&c| size[c as usize] < min_size).map(|c| (size[c as usize], c)).collect();
    while let Some((sz, c)) = small.pop_first() {
        if find(&mut parent, c) != c || size[c as usize] != sz {
            continue;
        }
        let neighbors: BTreeSet<u32> = core::mem::take(&mut adj[c as usize])
            .into_iter()
            .map(|x| find(&mut parent, x))
            .filter(|&x| x != c)
            .collect();
        let Some(&host) = neighbors
            .iter()
            .max_by(|&&a, &&b| size[a as usize].cmp(&size[b as usize]).then(b.cmp(&a)))
        else {
            continue;
        };
        parent[c as usize] = host;
        let was_small = size[host as usize] < min_size;
        let host_size = size[host as usize];
        size[host as usize] += sz;
        let mut merged = core::mem::take(&mut adj[host as usize]);
        merged.extend(neighbors.into_iter().filter(|&x| x != host));
        merged.remove(&c);
        adj[host as usize] = merged;
        if was_small {
            small.remove(&(host_size, host));
        }
        if size[host as usize] < min_size {
            small.insert((size[host as usize], host));
        }
    }

    let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
    let mut out = Vec::with_capacity(h * w);
    for &c in &comp {
        let root = find(&mut parent, c);
        let next = remap.len() as u32;
        out.push(*remap.entry(root).or_insert(next));
    }
    out
}
