//! Synthetic field images: textured elliptical panicles on a leafy
//! background, with exact dot, mask and thermal-time ground truth.

use panicle_core::{PixelCoord, RasterGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of panicles per image, drawn uniformly.
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Range of ellipse semi-axes in pixels.
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    /// Largest allowed overlap of two panicles as a fraction of the smaller one.
    pub max_occlusion: f64,
    /// Consecutive images that form one row segment's season.
    pub images_per_segment: usize,
    pub first_gdd: f64,
    pub gdd_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_blobs: 5,
            max_blobs: 20,
            min_semi_axis: 3.5,
            max_semi_axis: 7.0,
            max_occlusion: 0.3,
            images_per_segment: 5,
            first_gdd: 1100.0,
            gdd_step: 180.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, i: f64, j: f64) -> bool {
        let (dy, dx) = (i - self.center.0, j - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes.1;
        let v = (-dx * s + dy * c) / self.semi_axes.0;
        u * u + v * v <= 1.0
    }

    /// Squared normalized radius, 0 at the center and 1 on the outline.
    fn radius2(&self, i: f64, j: f64) -> f64 {
        let (dy, dx) = (i - self.center.0, j - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes.1;
        let v = (-dx * s + dy * c) / self.semi_axes.0;
        u * u + v * v
    }

    fn pixels(&self, h: usize, w: usize) -> Vec<usize> {
        let r = self.semi_axes.0.max(self.semi_axes.1).ceil() as isize + 1;
        let (ci, cj) = (self.center.0.round() as isize, self.center.1.round() as isize);
        let mut out = Vec::new();
        for i in (ci - r).max(0)..(ci + r + 1).min(h as isize) {
            for j in (cj - r).max(0)..(cj + r + 1).min(w as isize) {
                if self.contains(i as f64, j as f64) {
                    out.push(i as usize * w + j as usize);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub segment_id: String,
    pub gdd: f64,
    /// RGB in `[0, 1]`.
    pub image: RasterGrid,
    pub blobs: Vec<Ellipse>,
    /// One dot per panicle at its rounded center.
    pub dots: Vec<PixelCoord>,
    /// Visible pixels of every panicle (later panicles cover earlier ones).
    pub masks: Vec<Vec<usize>>,
}

impl SynthImage {
    pub fn count(&self) -> usize {
        self.blobs.len()
    }

    /// Instance raster: 0 for background, `k + 1` on panicle `k`.
    pub fn instance_raster(&self) -> RasterGrid {
        let (h, w, _) = self.image.shape();
        let mut g = RasterGrid::zeros(h, w, 1);
        for (k, mask) in self.masks.iter().enumerate() {
            for &p in mask {
                g.data_mut()[p] = (k + 1) as f64;
            }
        }
        g
    }
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    let set: std::collections::HashSet<usize> = a.iter().copied().collect();
    b.iter().filter(|p| set.contains(p)).count()
}

/// The `index`-th image of the dataset identified by `seed`. Every image
/// draws from its own random stream, so datasets of different lengths
/// share their common prefix.
pub fn generate_image(cfg: &SynthConfig, seed: u64, index: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let segment = index / cfg.images_per_segment.max(1);
    let visit = index % cfg.images_per_segment.max(1);
    let gdd = cfg.first_gdd + cfg.gdd_step * visit as f64 + rng.gen_range(0.0..cfg.gdd_step * 0.25);

    let target = if cfg.max_blobs >= cfg.min_blobs { rng.gen_range(cfg.min_blobs..=cfg.max_blobs) } else { 0 };
    let mut blobs: Vec<Ellipse> = Vec::new();
    let mut areas: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < target && attempts < 400 * target.max(1) {
        attempts += 1;
        let a = rng.gen_range(cfg.min_semi_axis..=cfg.max_semi_axis);
        let b = rng.gen_range(cfg.min_semi_axis..=cfg.max_semi_axis);
        let margin = a.max(b) * 0.5;
        let e = Ellipse {
            center: (rng.gen_range(margin..h as f64 - margin), rng.gen_range(margin..w as f64 - margin)),
            semi_axes: (a, b),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        let px = e.pixels(h, w);
        if px.is_empty() {
            continue;
        }
        let ok = areas.iter().all(|other| {
            let shared = overlap(other, &px) as f64;
            shared <= cfg.max_occlusion * other.len().min(px.len()) as f64
        });
        if ok {
            blobs.push(e);
            areas.push(px);
        }
    }

    let mut owner = vec![usize::MAX; h * w];
    for (k, px) in areas.iter().enumerate() {
        for &p in px {
            owner[p] = k;
        }
    }
    let mut masks = vec![Vec::new(); blobs.len()];
    for (p, &k) in owner.iter().enumerate() {
        if k != usize::MAX {
            masks[k].push(p);
        }
    }
    // a panicle fully covered by later ones loses its ground truth
    let keep: Vec<bool> = masks.iter().map(|m| !m.is_empty()).collect();
    let blobs: Vec<Ellipse> = blobs.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(b, _)| b).collect();
    let masks: Vec<Vec<usize>> = masks.into_iter().filter(|m| !m.is_empty()).collect();
    let mut owner = vec![usize::MAX; h * w];
    for (k, m) in masks.iter().enumerate() {
        for &p in m {
            owner[p] = k;
        }
    }

    let colors: Vec<[f64; 3]> = blobs
        .iter()
        .map(|_| [rng.gen_range(0.72..0.92), rng.gen_range(0.42..0.58), rng.gen_range(0.12..0.26)])
        .collect();
    let (fy, fx, phase) = (rng.gen_range(0.03..0.09), rng.gen_range(0.03..0.09), rng.gen_range(0.0..6.3));
    let mut image = RasterGrid::zeros(h, w, 3);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let noise = rng.gen_range(-0.04..0.04);
            let rgb = match owner[p] {
                usize::MAX => {
                    let leaf = 0.5 + 0.5 * ((i as f64 * fy + phase).sin() * (j as f64 * fx).cos());
                    [0.16 + 0.08 * leaf, 0.36 + 0.14 * leaf, 0.12 + 0.05 * leaf]
                }
                k => {
                    let shade = 1.0 - 0.25 * blobs[k].radius2(i as f64, j as f64).min(1.0);
                    let c = colors[k];
                    [c[0] * shade, c[1] * shade, c[2] * shade]
                }
            };
            for c in 0..3 {
                image.set(i, j, c, (rgb[c] + noise).clamp(0.0, 1.0));
            }
        }
    }

    let dots = blobs
        .iter()
        .map(|e| PixelCoord {
            row: (e.center.0.round() as usize).min(h - 1),
            col: (e.center.1.round() as usize).min(w - 1),
        })
        .collect();
    SynthImage {
        id: format!("img{index:04}"),
        segment_id: format!("seg{segment:03}"),
        gdd,
        image,
        blobs,
        dots,
        masks,
    }
}

/// Images `start..start + count` of the dataset identified by `seed`.
pub fn generate(cfg: &SynthConfig, seed: u64, start: usize, count: usize) -> Vec<SynthImage> {
    (start..start + count).map(|k| generate_image(cfg, seed, k)).collect()
}
