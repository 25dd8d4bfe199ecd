//! Regression targets built from human annotations: dot density, region
//! density and the smoothed foreground (detection) map.
//!
//! Dot and region targets are renormalized per annotated object after
//! blurring, so each panicle contributes exactly unit mass even when the
//! Gaussian spills over the image border.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::{gaussian_blur, gaussian_kernel, Dihedral, PixelCoord, RasterGrid};
use crate::slic::{SuperpixelLevel, SuperpixelMap};

pub const DEFAULT_SIGMA_DOT: f64 = 6.0;
pub const DEFAULT_SIGMA_REGION: f64 = 2.0;
pub const DEFAULT_SIGMA_DETECTION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Dot,
    Region,
}

/// One annotated panicle as a set of superpixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u32,
    pub superpixels: Vec<u32>,
}

impl Serialize for PixelCoord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        [self.row, self.col].serialize(s)
    }
}

impl<'de> Deserialize<'de> for PixelCoord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let [row, col] = <[usize; 2]>::deserialize(d)?;
        Ok(PixelCoord { row, col })
    }
}

/// Per-image annotation: dots or superpixel regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image: String,
    pub mode: AnnotationMode,
    pub level: SuperpixelLevel,
    #[serde(default)]
    pub dots: Vec<PixelCoord>,
    #[serde(default)]
    pub instances: Vec<Instance>,
}

impl AnnotationSet {
    pub fn dots(image: impl Into<String>, level: SuperpixelLevel, dots: Vec<PixelCoord>) -> Self {
        Self { image: image.into(), mode: AnnotationMode::Dot, level, dots, instances: Vec::new() }
    }

    pub fn regions(image: impl Into<String>, level: SuperpixelLevel, instances: Vec<Instance>) -> Self {
        Self { image: image.into(), mode: AnnotationMode::Region, level, dots: Vec::new(), instances }
    }

    /// Number of annotated panicles.
    pub fn count(&self) -> usize {
        match self.mode {
            AnnotationMode::Dot => self.dots.len(),
            AnnotationMode::Region => self.instances.len(),
        }
    }

    /// Checks dots against the image bounds, or instances against `spmap`.
    pub fn validate(&self, height: usize, width: usize, spmap: Option<&SuperpixelMap>) -> Result<()> {
        match self.mode {
            AnnotationMode::Dot => {
                if let Some(d) = self.dots.iter().find(|d| d.row >= height || d.col >= width) {
                    bail!(Annotation, "dot ({}, {}) outside {height}x{width} image", d.row, d.col);
                }
            }
            AnnotationMode::Region => {
                let n = spmap.map(SuperpixelMap::len);
                let mut used = BTreeSet::new();
                let mut ids = BTreeSet::new();
                for inst in &self.instances {
                    if !ids.insert(inst.id) {
                        bail!(Annotation, "duplicate instance id {}", inst.id);
                    }
                    if inst.superpixels.is_empty() {
                        bail!(Annotation, "instance {} has no superpixels", inst.id);
                    }
                    for &sp in &inst.superpixels {
                        if n.is_some_and(|n| sp as usize >= n) {
                            bail!(Annotation, "instance {} references unknown superpixel {sp}", inst.id);
                        }
                        if !used.insert(sp) {
                            bail!(Annotation, "superpixel {sp} belongs to more than one instance");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The annotation as it would have been drawn on a transformed image.
    /// Region instances keep their superpixel IDs; transform the map with
    /// [`SuperpixelMap::transform`] alongside.
    pub fn transform(&self, height: usize, width: usize, element: Dihedral) -> Self {
        let mut out = self.clone();
        out.dots = self.dots.iter().map(|&d| element.map_coord(height, width, d)).collect();
        out
    }

    /// Pixel indices of each region instance.
    pub fn instance_pixels(&self, spmap: &SuperpixelMap) -> Result<Vec<Vec<usize>>> {
        if self.mode != AnnotationMode::Region {
            bail!(Annotation, "instance pixels requested from a dot annotation");
        }
        self.validate(spmap.height(), spmap.width(), Some(spmap))?;
        let members = spmap.members();
        Ok(self
            .instances
            .iter()
            .map(|inst| {
                let mut px: Vec<usize> =
                    inst.superpixels.iter().flat_map(|&s| members[s as usize].iter().copied()).collect();
                px.sort_unstable();
                px
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Dot,
    Region,
    Detection,
}

/// A single-channel regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTarget {
    pub grid: RasterGrid,
    pub kind: TargetKind,
    pub count: f64,
}

/// Unit-mass Gaussian bump per dot, renormalized against border loss.
pub fn build_dot_density(ann: &AnnotationSet, shape: (usize, usize), sigma_dot: f64) -> Result<DensityTarget> {
    if ann.mode != AnnotationMode::Dot {
        bail!(Annotation, "dot density needs a dot annotation");
    }
    let (h, w) = shape;
    ann.validate(h, w, None)?;
    let taps = gaussian_kernel(sigma_dot)?;
    let r = taps.len() / 2;
    let mut grid = RasterGrid::zeros(h, w, 1);
    for d in &ann.dots {
        let (r0, r1) = (d.row.saturating_sub(r), (d.row + r).min(h - 1));
        let (c0, c1) = (d.col.saturating_sub(r), (d.col + r).min(w - 1));
        let tap = |x: usize, center: usize| taps[x + r - center];
        let row_mass: f64 = (r0..=r1).map(|i| tap(i, d.row)).sum();
        let col_mass: f64 = (c0..=c1).map(|j| tap(j, d.col)).sum();
        let norm = 1.0 / (row_mass * col_mass);
        for i in r0..=r1 {
            let ti = tap(i, d.row) * norm;
            for j in c0..=c1 {
                grid.add(i, j, 0, ti * tap(j, d.col));
            }
        }
    }
    Ok(DensityTarget { grid, kind: TargetKind::Dot, count: ann.dots.len() as f64 })
}

/// Region density from superpixel instances.
pub fn build_region_density(
    ann: &AnnotationSet,
    spmap: &SuperpixelMap,
    shape: (usize, usize),
    sigma_region: f64,
) -> Result<DensityTarget> {
    check_map_shape(spmap, shape)?;
    let masks = ann.instance_pixels(spmap)?;
    region_density_from_masks(shape, &masks, sigma_region)
}

/// Region density from explicit pixel masks (linear indices). Every mask
/// gets uniform density `1/|mask|`, is blurred on its own and rescaled back
/// to unit mass; overlapping masks add.
pub fn region_density_from_masks(
    shape: (usize, usize),
    masks: &[Vec<usize>],
    sigma_region: f64,
) -> Result<DensityTarget> {
    let (h, w) = shape;
    let taps = gaussian_kernel(sigma_region)?;
    let r = taps.len() / 2;
    let mut grid = RasterGrid::zeros(h, w, 1);
    for (k, mask) in masks.iter().enumerate() {
        if mask.is_empty() {
            bail!(Annotation, "instance {k} is empty");
        }
        if let Some(&p) = mask.iter().find(|&&p| p >= h * w) {
            bail!(Annotation, "pixel index {p} outside {h}x{w} image");
        }
        // Blur inside the bounding box grown by the kernel radius; nothing
        // reaches farther.
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for &p in mask {
            let (i, j) = (p / w, p % w);
            r0 = r0.min(i);
            r1 = r1.max(i);
            c0 = c0.min(j);
            c1 = c1.max(j);
        }
        let (r0, r1) = (r0.saturating_sub(r), (r1 + r).min(h - 1));
        let (c0, c1) = (c0.saturating_sub(r), (c1 + r).min(w - 1));
        let (lh, lw) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut local = RasterGrid::zeros(lh, lw, 1);
        let v = 1.0 / mask.len() as f64;
        for &p in mask {
            local.set(p / w - r0, p % w - c0, 0, v);
        }
        let blurred = gaussian_blur(&local, sigma_region)?;
        let norm = 1.0 / blurred.total();
        for i in 0..lh {
            for j in 0..lw {
                grid.add(r0 + i, c0 + j, 0, blurred.get(i, j, 0) * norm);
            }
        }
    }
    Ok(DensityTarget { grid, kind: TargetKind::Region, count: masks.len() as f64 })
}

/// Smoothed binary panicle mask, clipped to `[0, 1]`.
pub fn build_detection_target(
    ann: &AnnotationSet,
    spmap: &SuperpixelMap,
    shape: (usize, usize),
    sigma_det: f64,
) -> Result<DensityTarget> {
    check_map_shape(spmap, shape)?;
    let masks = ann.instance_pixels(spmap)?;
    detection_from_masks(shape, &masks, sigma_det)
}

pub fn detection_from_masks(shape: (usize, usize), masks: &[Vec<usize>], sigma_det: f64) -> Result<DensityTarget> {
    let (h, w) = shape;
    let mut fg = RasterGrid::zeros(h, w, 1);
    for mask in masks {
        for &p in mask {
            if p >= h * w {
                bail!(Annotation, "pixel index {p} outside {h}x{w} image");
            }
            fg.data_mut()[p] = 1.0;
        }
    }
    let grid = gaussian_blur(&fg, sigma_det)?.map(|v| v.clamp(0.0, 1.0));
    Ok(DensityTarget { grid, kind: TargetKind::Detection, count: masks.len() as f64 })
}

fn check_map_shape(spmap: &SuperpixelMap, shape: (usize, usize)) -> Result<()> {
    if (spmap.height(), spmap.width()) != shape {
        bail!(
            Shape,
            "superpixel map is {}x{}, target is {}x{}",
            spmap.height(),
            spmap.width(),
            shape.0,
            shape.1
        );
    }
    Ok(())
}

/// Binary union of instance masks.
pub fn foreground_mask(shape: (usize, usize), masks: &[Vec<usize>]) -> Vec<bool> {
    let mut fg = vec![false; shape.0 * shape.1];
    for &p in masks.iter().flatten() {
        fg[p] = true;
    }
    fg
}
