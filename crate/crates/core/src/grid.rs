//! Raster storage and the few raster operations every stage needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// A pixel index, row first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// H×W×C real-valued raster, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            bail!(Shape, "{} values for a {height}x{width}x{channels} grid", data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Parameter, "raster values must be finite");
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds a grid by evaluating `f(row, col, channel)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.offset(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let k = self.offset(row, col, channel);
        self.data[k] = value;
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let k = self.offset(row, col, channel);
        self.data[k] += value;
    }

    /// The feature vector of one pixel (all channels).
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let k = self.offset(row, col, 0);
        &self.data[k..k + self.channels]
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &RasterGrid) -> Result<()> {
        if self.shape() != other.shape() {
            bail!(Shape, "cannot add {:?} to {:?}", other.shape(), self.shape());
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Extracts one channel as a single-channel grid.
    pub fn channel(&self, channel: usize) -> Result<Self> {
        if channel >= self.channels {
            bail!(Shape, "channel {channel} of a {}-channel grid", self.channels);
        }
        let data = self.data.iter().skip(channel).step_by(self.channels).copied().collect();
        Ok(Self { height: self.height, width: self.width, channels: 1, data })
    }

    /// Concatenates grids of identical height and width along the channel axis.
    pub fn stack(grids: &[&RasterGrid]) -> Result<Self> {
        let Some(first) = grids.first() else {
            bail!(Parameter, "nothing to stack");
        };
        let (h, w) = (first.height, first.width);
        if let Some(g) = grids.iter().find(|g| g.height != h || g.width != w) {
            bail!(Shape, "cannot stack {}x{} with {}x{}", g.height, g.width, h, w);
        }
        let channels = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for g in grids {
                data.extend_from_slice(&g.data[p * g.channels..(p + 1) * g.channels]);
            }
        }
        Ok(Self { height: h, width: w, channels, data })
    }

    fn require_single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            bail!(Shape, "{what} needs a single-channel grid, got {} channels", self.channels);
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps, truncated at 4σ.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!(Parameter, "gaussian sigma must be positive, got {sigma}");
    }
    let radius = libm::ceil(4.0 * sigma) as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| {
            let x = x as f64;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let norm: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= norm;
    }
    Ok(taps)
}

/// Separable Gaussian convolution with zero padding outside the grid.
pub fn gaussian_blur(grid: &RasterGrid, sigma: f64) -> Result<RasterGrid> {
    let taps = gaussian_kernel(sigma)?;
    grid.require_single_channel("gaussian_blur")?;
    let (h, w) = (grid.height, grid.width);
    let r = (taps.len() / 2) as isize;

    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        let src = &grid.data[i * w..(i + 1) * w];
        let dst = &mut rows[i * w..(i + 1) * w];
        for (j, out) in dst.iter_mut().enumerate() {
            let lo = (j as isize - r).max(0) as usize;
            let hi = ((j as isize + r) as usize).min(w - 1);
            let mut acc = 0.0;
            for jj in lo..=hi {
                acc += src[jj] * taps[(jj as isize - j as isize + r) as usize];
            }
            *out = acc;
        }
    }

    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let lo = (i as isize - r).max(0) as usize;
        let hi = ((i as isize + r) as usize).min(h - 1);
        let dst = &mut out[i * w..(i + 1) * w];
        for ii in lo..=hi {
            let t = taps[(ii as isize - i as isize + r) as usize];
            for (o, s) in dst.iter_mut().zip(&rows[ii * w..(ii + 1) * w]) {
                *o += t * s;
            }
        }
    }
    Ok(RasterGrid { height: h, width: w, channels: 1, data: out })
}

/// Sums non-overlapping `factor`×`factor` blocks, per channel.
pub fn sum_pool(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor == 0 {
        bail!(Parameter, "pool factor must be at least 1");
    }
    if grid.height % factor != 0 || grid.width % factor != 0 {
        bail!(Shape, "{}x{} is not divisible by {factor}", grid.height, grid.width);
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (oh, ow, c) = (grid.height / factor, grid.width / factor, grid.channels);
    let mut out = RasterGrid::zeros(oh, ow, c);
    for i in 0..grid.height {
        for j in 0..grid.width {
            for ch in 0..c {
                out.add(i / factor, j / factor, ch, grid.get(i, j, ch));
            }
        }
    }
    Ok(out)
}

/// Block mean; used where pooled values must stay probabilities.
pub fn mean_pool(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    let pooled = sum_pool(grid, factor)?;
    Ok(pooled.scale(1.0 / (factor * factor) as f64))
}

/// Replicates every cell into a `factor`×`factor` block.
pub fn upsample_nearest(grid: &RasterGrid, factor: usize) -> Result<RasterGrid> {
    if factor == 0 {
        bail!(Parameter, "upsample factor must be at least 1");
    }
    let c = grid.channels;
    Ok(RasterGrid::from_fn(grid.height * factor, grid.width * factor, c, |i, j, ch| {
        grid.get(i / factor, j / factor, ch)
    }))
}

/// One of the eight symmetries of the square: `rotation` quarter turns
/// counter-clockwise, applied after an optional left-right mirror.
///
/// Elements 0..4 are the pure rotations, 4..8 mirror first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(element: u8) -> Result<Self> {
        if element >= 8 {
            bail!(Parameter, "dihedral element must be in 0..8, got {element}");
        }
        Ok(Self(element))
    }

    pub fn all() -> impl Iterator<Item = Dihedral> + Clone {
        (0..8).map(Dihedral)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn rotation(self) -> u8 {
        self.0 % 4
    }

    pub fn mirrored(self) -> bool {
        self.0 >= 4
    }

    fn from_parts(rotation: u8, mirrored: bool) -> Self {
        Self(rotation % 4 + if mirrored { 4 } else { 0 })
    }

    pub fn inverse(self) -> Self {
        if self.mirrored() {
            self
        } else {
            Self::from_parts((4 - self.rotation()) % 4, false)
        }
    }

    /// `self.then(other)` applies `self` first and `other` second.
    pub fn then(self, other: Dihedral) -> Self {
        // other ∘ self with R^a M^p R^b M^q = R^(a ± b) M^(p xor q)
        let (a, p) = (other.rotation(), other.mirrored());
        let (b, q) = (self.rotation(), self.mirrored());
        let rot = if p { (a + 4 - b) % 4 } else { (a + b) % 4 };
        Self::from_parts(rot, p ^ q)
    }

    pub fn output_shape(self, height: usize, width: usize) -> (usize, usize) {
        if self.rotation() % 2 == 1 {
            (width, height)
        } else {
            (height, width)
        }
    }

    /// Where pixel `(row, col)` of an `height`×`width` grid lands.
    pub fn map_coord(self, height: usize, width: usize, p: PixelCoord) -> PixelCoord {
        let (mut h, mut w) = (height, width);
        let (mut i, mut j) = (p.row, p.col);
        if self.mirrored() {
            j = w - 1 - j;
        }
        for _ in 0..self.rotation() {
            // quarter turn counter-clockwise
            let ni = w - 1 - j;
            let nj = i;
            i = ni;
            j = nj;
            core::mem::swap(&mut h, &mut w);
        }
        PixelCoord::new(i, j)
    }
}

/// Applies a dihedral symmetry to every channel of `grid`.
pub fn dihedral_transform(grid: &RasterGrid, element: Dihedral) -> RasterGrid {
    let (h, w, c) = grid.shape();
    let (oh, ow) = element.output_shape(h, w);
    let mut out = RasterGrid::zeros(oh, ow, c);
    for i in 0..h {
        for j in 0..w {
            let q = element.map_coord(h, w, PixelCoord::new(i, j));
            let src = (i * w + j) * c;
            let dst = (q.row * ow + q.col) * c;
            out.data[dst..dst + c].copy_from_slice(&grid.data[src..src + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(h: usize, w: usize) -> RasterGrid {
        RasterGrid::from_fn(h, w, 1, |i, j, _| (i * w + j) as f64)
    }

    #[test]
    fn blur_of_zeros_is_zero() {
        let g = RasterGrid::zeros(20, 20, 1);
        assert_eq!(gaussian_blur(&g, 2.0).unwrap().total(), 0.0);
    }

    #[test]
    fn centered_impulse_keeps_unit_mass() {
        let mut g = RasterGrid::zeros(65, 65, 1);
        g.set(32, 32, 0, 1.0);
        let b = gaussian_blur(&g, 2.0).unwrap();
        assert!((b.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn corner_impulse_loses_mass_to_padding() {
        let mut g = RasterGrid::zeros(65, 65, 1);
        g.set(0, 0, 0, 1.0);
        let b = gaussian_blur(&g, 2.0).unwrap();
        // Direct summation: the retained mass is the product of the two
        // one-sided tap sums.
        let taps = gaussian_kernel(2.0).unwrap();
        let half: f64 = taps[taps.len() / 2..].iter().sum();
        assert!(b.total() < 1.0);
        assert!((b.total() - half * half).abs() < 1e-12);
    }

    #[test]
    fn blur_rejects_bad_sigma_and_channels() {
        let g = RasterGrid::zeros(4, 4, 1);
        assert!(matches!(gaussian_blur(&g, 0.0), Err(crate::Error::Parameter(_))));
        assert!(matches!(gaussian_blur(&g, -1.0), Err(crate::Error::Parameter(_))));
        let g3 = RasterGrid::zeros(4, 4, 3);
        assert!(matches!(gaussian_blur(&g3, 1.0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn kernel_spans_four_sigma() {
        assert_eq!(gaussian_kernel(2.0).unwrap().len(), 17);
        assert_eq!(gaussian_kernel(1.3).unwrap().len(), 2 * 6 + 1);
    }

    #[test]
    fn sum_pool_blocks() {
        let g = RasterGrid::filled(4, 4, 1, 1.0);
        let p = sum_pool(&g, 2).unwrap();
        assert_eq!(p.shape(), (2, 2, 1));
        assert!(p.data().iter().all(|&v| v == 4.0));
        assert_eq!(sum_pool(&g, 1).unwrap(), g);
        assert!(matches!(sum_pool(&g, 3), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn rotation_of_2x3() {
        // 0 1 2        2 5
        // 3 4 5   ->   1 4
        //              0 3
        let g = labeled(2, 3);
        let r = dihedral_transform(&g, Dihedral::new(1).unwrap());
        assert_eq!(r.shape(), (3, 2, 1));
        assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
    }

    #[test]
    fn identity_and_inverses() {
        let g = labeled(3, 5);
        assert_eq!(dihedral_transform(&g, Dihedral::IDENTITY), g);
        for e in Dihedral::all() {
            let t = dihedral_transform(&g, e);
            assert_eq!(dihedral_transform(&t, e.inverse()), g, "element {e:?}");
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let g = labeled(3, 4);
        for a in Dihedral::all() {
            for b in Dihedral::all() {
                let seq = dihedral_transform(&dihedral_transform(&g, a), b);
                assert_eq!(seq, dihedral_transform(&g, a.then(b)), "{a:?} then {b:?}");
            }
        }
    }

    #[test]
    fn out_of_range_element() {
        assert!(Dihedral::new(8).is_err());
    }

    #[test]
    fn stack_and_channel_roundtrip() {
        let a = labeled(2, 2);
        let b = a.scale(10.0);
        let s = RasterGrid::stack(&[&a, &b]).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.channel(1).unwrap(), b);
        assert_eq!(s.pixel(1, 1), &[3.0, 30.0]);
    }
}
