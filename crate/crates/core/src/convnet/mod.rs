//! A small fully convolutional density regressor.
//!
//! Every layer is a same-padded convolution followed by batch normalization
//! and ReLU, except the last, which is a plain linear convolution. Optional
//! 2×2 max pools sit in front of selected layers, so the output map is
//! smaller than the input by `2^pools` along each axis.
//!
//! Activations are kept channel-first internally so that convolutions are
//! a single GEMM against an im2col matrix.

mod real;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::grid::RasterGrid;

pub use real::Real;
pub use train::{recalibrate_batch_norm, train, train_with_progress, TrainConfig, TrainReport};

use real::gemm;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const DIRECT_CONV_MAX_PAIRS: usize = 64;

/// Layer widths, kernel sizes and pooling positions.
///
/// `pool_before` holds zero-based layer indices: `[1, 2]` pools in front of
/// the second and third convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dims: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pool_before: Vec<usize>,
    pub input_channels: usize,
}

impl NetConfig {
    /// The tuned eight-layer architecture.
    pub fn ours(input_channels: usize) -> Self {
        Self {
            dims: vec![20, 40, 100, 400, 800, 1500, 100, 1],
            kernels: vec![13, 9, 5, 5, 5, 3, 1, 1],
            pool_before: vec![1, 2],
            input_channels,
        }
    }

    /// The six-layer counting-CNN baseline.
    pub fn ccnn(input_channels: usize) -> Self {
        Self {
            dims: vec![32, 32, 32, 1000, 400, 1],
            kernels: vec![7, 7, 3, 1, 1, 1],
            pool_before: vec![1, 2],
            input_channels,
        }
    }

    /// Divides every hidden width by `divisor`, keeping at least one channel
    /// and the single output channel.
    pub fn scaled_width(&self, divisor: usize) -> Self {
        let last = self.dims.len().saturating_sub(1);
        let dims = self
            .dims
            .iter()
            .enumerate()
            .map(|(l, &d)| if l == last { d } else { (d / divisor.max(1)).max(1) })
            .collect();
        Self { dims, ..self.clone() }
    }

    pub fn with_input_channels(mut self, input_channels: usize) -> Self {
        self.input_channels = input_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.kernels.len() {
            bail!(Parameter, "{} dims for {} kernels", self.dims.len(), self.kernels.len());
        }
        if self.dims.last() != Some(&1) {
            bail!(Parameter, "the last layer must have one output channel");
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            bail!(Parameter, "kernel size {k} is not odd");
        }
        if self.dims.contains(&0) || self.input_channels == 0 {
            bail!(Parameter, "layer widths must be positive");
        }
        if let Some(&p) = self.pool_before.iter().find(|&&p| p >= self.dims.len()) {
            bail!(Parameter, "pool before layer {p} of {}", self.dims.len());
        }
        Ok(())
    }

    /// Ratio between input and output resolution.
    pub fn downsample(&self) -> usize {
        let mut pools: Vec<usize> = self.pool_before.clone();
        pools.sort_unstable();
        pools.dedup();
        1 << pools.len()
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    fn pools_before(&self, layer: usize) -> bool {
        self.pool_before.contains(&layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// One convolution, with batch norm unless it is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool_before: bool,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm: Option<BatchNorm<T>>,
}

impl<T: Real> ConvLayer<T> {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Few channel pairs with a spatial kernel: shifted row updates beat im2col.
    fn direct(&self) -> bool {
        self.kernel > 1 && self.in_channels * self.out_channels <= DIRECT_CONV_MAX_PAIRS
    }
}

/// Network parameters plus the bookkeeping needed for reproducible training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: NetConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub seed: u64,
    pub step: u64,
}

/// Gradients laid out like [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(model: &ModelState<T>) -> Self {
        Self { tensors: model.params().iter().map(|p| vec![T::ZERO; p.len()]).collect() }
    }
}

impl<T: Real> ModelState<T> {
    /// He-uniform weights, zero biases, unit BN scale.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let n = config.layers();
        let mut layers = Vec::with_capacity(n);
        let mut in_c = config.input_channels;
        for l in 0..n {
            let (out_c, k) = (config.dims[l], config.kernels[l]);
            let fan_in = (in_c * k * k) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            let weight = (0..out_c * in_c * k * k).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
            let norm = (l + 1 < n).then(|| BatchNorm {
                gamma: vec![T::ONE; out_c],
                beta: vec![T::ZERO; out_c],
                running_mean: vec![T::ZERO; out_c],
                running_var: vec![T::ONE; out_c],
            });
            layers.push(ConvLayer {
                in_channels: in_c,
                out_channels: out_c,
                kernel: k,
                pool_before: config.pools_before(l),
                weight,
                bias: vec![T::ZERO; out_c],
                norm,
            });
            in_c = out_c;
        }
        Ok(Self { config, layers, seed, step: 0 })
    }

    /// Zeroes the linear output layer so the initial density map is empty
    /// and the first steps fit the output scale instead of undoing it.
    pub fn with_zero_output(mut self) -> Self {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.iter_mut().for_each(|w| *w = T::ZERO);
        last.bias.iter_mut().for_each(|b| *b = T::ZERO);
        self
    }

    /// Trainable tensors in declaration order: per layer weight, bias and,
    /// where present, BN scale and shift.
    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.as_slice());
            out.push(layer.bias.as_slice());
            if let Some(bn) = &layer.norm {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.as_mut_slice());
            out.push(layer.bias.as_mut_slice());
            if let Some(bn) = &mut layer.norm {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        ModelState {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    pool_before: l.pool_before,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    norm: l.norm.as_ref().map(|bn| BatchNorm {
                        gamma: conv(&bn.gamma),
                        beta: conv(&bn.beta),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                    }),
                })
                .collect(),
            seed: self.seed,
            step: self.step,
        }
    }

    /// Output map size for an input of `height`×`width`.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.downsample();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            bail!(Shape, "{height}x{width} input is not divisible by {f}");
        }
        Ok((height / f, width / f))
    }

    fn check_input(&self, input: &RasterGrid) -> Result<()> {
        if input.channels() != self.config.input_channels {
            bail!(Shape, "model expects {} input channels, got {}", self.config.input_channels, input.channels());
        }
        self.output_shape(input.height(), input.width()).map(|_| ())
    }

    /// Runs the network on one image. In inference mode the output is
    /// clamped at zero; in training mode the image is treated as a batch of
    /// one and normalized with its own statistics.
    pub fn forward(&self, input: &RasterGrid, training: bool) -> Result<RasterGrid> {
        self.check_input(input)?;
        let (h, w) = (input.height(), input.width());
        let x = to_chw::<T>(input);
        let mode = if training { Mode::BatchStats } else { Mode::Running };
        let (out, oh, ow) = self.forward_batch(vec![x], h, w, mode, None);
        let data = out[0]
            .iter()
            .map(|v| {
                let v = v.to_f64();
                if training {
                    v
                } else {
                    v.max(0.0)
                }
            })
            .collect();
        RasterGrid::from_vec(oh, ow, 1, data)
    }

    /// Sum of the non-negative predicted density.
    pub fn predict_count(&self, input: &RasterGrid) -> Result<f64> {
        Ok(self.forward(input, false)?.total())
    }

    /// Mean squared error over the output cells of a batch, and its
    /// gradient with respect to every parameter (batch-statistics mode).
    pub fn loss_and_gradients(&self, inputs: &[RasterGrid], targets: &[RasterGrid]) -> Result<(f64, Gradients<T>)> {
        let (loss, grads, _) = self.loss_grad_stats(inputs, targets)?;
        Ok((loss, grads))
    }

    pub(crate) fn loss_grad_stats(
        &self,
        inputs: &[RasterGrid],
        targets: &[RasterGrid],
    ) -> Result<(f64, Gradients<T>, Vec<BatchStats<T>>)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            bail!(Parameter, "{} inputs for {} targets", inputs.len(), targets.len());
        }
        let (h, w) = (inputs[0].height(), inputs[0].width());
        for x in inputs {
            self.check_input(x)?;
            if (x.height(), x.width()) != (h, w) {
                bail!(Shape, "batch mixes {h}x{w} and {}x{} inputs", x.height(), x.width());
            }
        }
        let (oh, ow) = self.output_shape(h, w)?;
        for t in targets {
            if t.shape() != (oh, ow, 1) {
                bail!(Shape, "target is {:?}, network output is {oh}x{ow}x1", t.shape());
            }
        }

        let xs: Vec<Vec<T>> = inputs.iter().map(to_chw::<T>).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        let (out, _, _) = self.forward_batch(xs, h, w, Mode::BatchStats, Some(&mut caches));

        let cells = (inputs.len() * oh * ow) as f64;
        let mut loss = 0.0;
        let scale = T::from_f64(2.0 / cells);
        let grad_out: Vec<Vec<T>> = out
            .iter()
            .zip(targets)
            .map(|(y, t)| {
                y.iter()
                    .zip(t.data())
                    .map(|(&p, &q)| {
                        let d = p.to_f64() - q;
                        loss += d * d;
                        scale * T::from_f64(d)
                    })
                    .collect()
            })
            .collect();
        loss /= cells;

        let stats = caches.iter().map(|c| c.stats.clone()).collect();
        let grads = self.backward(grad_out, &caches);
        Ok((loss, grads, stats))
    }

    /// Per-layer batch statistics of one training-mode forward pass.
    pub(crate) fn batch_stats(&self, inputs: &[RasterGrid]) -> Result<Vec<BatchStats<T>>> {
        let (h, w) = (inputs[0].height(), inputs[0].width());
        for x in inputs {
            self.check_input(x)?;
            if (x.height(), x.width()) != (h, w) {
                bail!(Shape, "batch mixes {h}x{w} and {}x{} inputs", x.height(), x.width());
            }
        }
        self.output_shape(h, w)?;
        let xs: Vec<Vec<T>> = inputs.iter().map(to_chw::<T>).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        self.forward_batch(xs, h, w, Mode::BatchStats, Some(&mut caches));
        Ok(caches.into_iter().map(|c| c.stats).collect())
    }

    fn forward_batch(
        &self,
        mut xs: Vec<Vec<T>>,
        mut h: usize,
        mut w: usize,
        mode: Mode,
        mut caches: Option<&mut Vec<LayerCache<T>>>,
    ) -> (Vec<Vec<T>>, usize, usize) {
        let last = self.layers.len() - 1;
        let mut col = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut argmax = Vec::new();
            let in_hw = (h, w);
            if layer.pool_before {
                let mut pooled = Vec::with_capacity(xs.len());
                for x in &xs {
                    let (p, idx) = max_pool2(x, layer.in_channels, h, w);
                    pooled.push(p);
                    if caches.is_some() {
                        argmax.push(idx);
                    }
                }
                xs = pooled;
                h /= 2;
                w /= 2;
            }
            let n = h * w;
            let mut zs: Vec<Vec<T>> = Vec::with_capacity(xs.len());
            for x in &xs {
                let mut z = vec![T::ZERO; layer.out_channels * n];
                for (o, zc) in z.chunks_mut(n).enumerate() {
                    zc.iter_mut().for_each(|v| *v = layer.bias[o]);
                }
                if layer.direct() {
                    direct_conv(x, &layer.weight, layer.in_channels, layer.out_channels, h, w, layer.kernel, &mut z);
                } else {
                    let cols = patches(x, layer.in_channels, h, w, layer.kernel, &mut col);
                    gemm(layer.out_channels, layer.patch_len(), n, &layer.weight, false, cols, false, T::ONE, &mut z);
                }
                zs.push(z);
            }

            let mut stats = BatchStats::default();
            let mut xhat = Vec::new();
            let ys = if let Some(bn) = &layer.norm {
                let (mean, var) = match mode {
                    Mode::BatchStats => channel_moments(&zs, layer.out_channels, n),
                    Mode::Running => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std: Vec<T> =
                    var.iter().map(|&v| T::ONE / (v + T::from_f64(BN_EPSILON)).sqrt()).collect();
                let mut ys = Vec::with_capacity(zs.len());
                for z in &zs {
                    let mut xh = z.clone();
                    for (c, chunk) in xh.chunks_mut(n).enumerate() {
                        for v in chunk {
                            *v = (*v - mean[c]) * inv_std[c];
                        }
                    }
                    let mut y = xh.clone();
                    for (c, chunk) in y.chunks_mut(n).enumerate() {
                        for v in chunk {
                            *v = bn.gamma[c] * *v + bn.beta[c];
                        }
                    }
                    if caches.is_some() {
                        xhat.push(xh);
                    }
                    ys.push(y);
                }
                stats = BatchStats { mean, var, count: zs.len() * n, inv_std };
                ys
            } else {
                zs
            };

            let outs: Vec<Vec<T>> = if l < last {
                ys.iter().map(|y| y.iter().map(|&v| v.max(T::ZERO)).collect()).collect()
            } else {
                Vec::new()
            };

            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache { in_hw, argmax, inputs: core::mem::take(&mut xs), xhat, pre_act: Vec::new(), stats });
            }
            if l < last {
                if let Some(c) = caches.as_deref_mut() {
                    c.last_mut().unwrap().pre_act = ys;
                }
                xs = outs;
            } else {
                xs = ys;
            }
        }
        (xs, h, w)
    }

    fn backward(&self, mut grad: Vec<Vec<T>>, caches: &[LayerCache<T>]) -> Gradients<T> {
        let mut grads = Gradients::zeros_like(self);
        let mut slot = grads.tensors.len();
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let cache = &caches[l];
            let (h, w) = if layer.pool_before { (cache.in_hw.0 / 2, cache.in_hw.1 / 2) } else { cache.in_hw };
            let n = h * w;
            let oc = layer.out_channels;

            if l + 1 < self.layers.len() {
                for (g, y) in grad.iter_mut().zip(&cache.pre_act) {
                    for (gv, &yv) in g.iter_mut().zip(y) {
                        if yv <= T::ZERO {
                            *gv = T::ZERO;
                        }
                    }
                }
            }

            if let Some(bn) = &layer.norm {
                slot -= 2;
                let mut dgamma = vec![T::ZERO; oc];
                let mut dbeta = vec![T::ZERO; oc];
                for (g, xh) in grad.iter().zip(&cache.xhat) {
                    for c in 0..oc {
                        let (gc, xc) = (&g[c * n..(c + 1) * n], &xh[c * n..(c + 1) * n]);
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for (&a, &b) in gc.iter().zip(xc) {
                            sg += a;
                            sgx += a * b;
                        }
                        dbeta[c] += sg;
                        dgamma[c] += sgx;
                    }
                }
                let m = T::from_f64(cache.stats.count as f64);
                for (g, xh) in grad.iter_mut().zip(&cache.xhat) {
                    for c in 0..oc {
                        let k = bn.gamma[c] * cache.stats.inv_std[c] / m;
                        for (gv, &xv) in g[c * n..(c + 1) * n].iter_mut().zip(&xh[c * n..(c + 1) * n]) {
                            *gv = k * (m * *gv - dbeta[c] - xv * dgamma[c]);
                        }
                    }
                }
                grads.tensors[slot] = dgamma;
                grads.tensors[slot + 1] = dbeta;
            }

            slot -= 2;
            let kk = layer.patch_len();
            let mut dw = vec![T::ZERO; oc * kk];
            let mut db = vec![T::ZERO; oc];
            let need_input_grad = l > 0;
            let mut next_grad = Vec::with_capacity(if need_input_grad { grad.len() } else { 0 });
            for (s, g) in grad.iter().enumerate() {
                for c in 0..oc {
                    let mut acc = T::ZERO;
                    for &v in &g[c * n..(c + 1) * n] {
                        acc += v;
                    }
                    db[c] += acc;
                }
                let x = &cache.inputs[s];
                let mut dx = Vec::new();
                if layer.direct() {
                    direct_conv_weight_grad(x, g, layer.in_channels, oc, h, w, layer.kernel, &mut dw);
                    if need_input_grad {
                        dx = vec![T::ZERO; layer.in_channels * n];
                        direct_conv_input_grad(g, &layer.weight, layer.in_channels, oc, h, w, layer.kernel, &mut dx);
                    }
                } else {
                    let cols = patches(x, layer.in_channels, h, w, layer.kernel, &mut col);
                    // dW += dZ · colsᵀ
                    gemm(oc, n, kk, g, false, cols, true, T::ONE, &mut dw);
                    if need_input_grad {
                        // dcols = Wᵀ · dZ
                        dcol.clear();
                        dcol.resize(kk * n, T::ZERO);
                        gemm(kk, oc, n, &layer.weight, true, g, false, T::ZERO, &mut dcol);
                        dx = vec![T::ZERO; layer.in_channels * n];
                        col2im(&dcol, layer.in_channels, h, w, layer.kernel, &mut dx);
                    }
                }
                if need_input_grad {
                    if layer.pool_before {
                        let (ih, iw) = cache.in_hw;
                        let mut full = vec![T::ZERO; layer.in_channels * ih * iw];
                        for (d, &src) in dx.iter().zip(&cache.argmax[s]) {
                            full[src as usize] += *d;
                        }
                        dx = full;
                    }
                    next_grad.push(dx);
                }
            }
            grads.tensors[slot] = dw;
            grads.tensors[slot + 1] = db;
            grad = next_grad;
        }
        grads
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    BatchStats,
    Running,
}

/// Per-channel batch statistics of one normalized layer.
#[derive(Debug, Clone, Default)]
pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
    inv_std: Vec<T>,
}

struct LayerCache<T> {
    in_hw: (usize, usize),
    argmax: Vec<Vec<u32>>,
    inputs: Vec<Vec<T>>,
    xhat: Vec<Vec<T>>,
    pre_act: Vec<Vec<T>>,
    stats: BatchStats<T>,
}

pub(crate) fn to_chw<T: Real>(g: &RasterGrid) -> Vec<T> {
    let (h, w, c) = g.shape();
    let mut out = vec![T::ZERO; h * w * c];
    for (p, px) in g.data().chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + p] = T::from_f64(v);
        }
    }
    out
}

fn channel_moments<T: Real>(zs: &[Vec<T>], channels: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let count = (zs.len() * n) as f64;
    let mut mean = vec![T::ZERO; channels];
    let mut var = vec![T::ZERO; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for z in zs {
            for &v in &z[c * n..(c + 1) * n] {
                s += v.to_f64();
            }
        }
        let m = s / count;
        let mut q = 0.0f64;
        for z in zs {
            for &v in &z[c * n..(c + 1) * n] {
                let d = v.to_f64() - m;
                q += d * d;
            }
        }
        mean[c] = T::from_f64(m);
        var[c] = T::from_f64(q / count);
    }
    (mean, var)
}

/// Output rows `[i0, i1)` and columns `[j0, j1)` whose source pixel at
/// offset `(di, dj)` lies inside an `h × w` plane.
fn shifted_window(h: usize, w: usize, di: isize, dj: isize) -> (usize, usize, usize, usize) {
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    (clamp(-di, h), clamp(h as isize - di, h), clamp(-dj, w), clamp(w as isize - dj, w))
}

/// Same-padded convolution accumulated into `z` (`oc × h·w`, CHW).
#[allow(clippy::too_many_arguments)]
fn direct_conv<T: Real>(x: &[T], weight: &[T], c: usize, oc: usize, h: usize, w: usize, k: usize, z: &mut [T]) {
    let n = h * w;
    let pad = (k / 2) as isize;
    for o in 0..oc {
        let out = &mut z[o * n..(o + 1) * n];
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = weight[((o * c + ch) * k + ki) * k + kj];
                    let (di, dj) = (ki as isize - pad, kj as isize - pad);
                    let (i0, i1, j0, j1) = shifted_window(h, w, di, dj);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let src = (i as isize + di) as usize * w + (j0 as isize + dj) as usize;
                        let dst = &mut out[i * w + j0..i * w + j1];
                        for (d, &v) in dst.iter_mut().zip(&plane[src..src + (j1 - j0)]) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product over eight independent partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::ZERO, |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_weight_grad<T: Real>(x: &[T], g: &[T], c: usize, oc: usize, h: usize, w: usize, k: usize, dw: &mut [T]) {
    let n = h * w;
    let pad = (k / 2) as isize;
    for o in 0..oc {
        let go = &g[o * n..(o + 1) * n];
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            for ki in 0..k {
                for kj in 0..k {
                    let (di, dj) = (ki as isize - pad, kj as isize - pad);
                    let (i0, i1, j0, j1) = shifted_window(h, w, di, dj);
                    let mut acc = T::ZERO;
                    if j0 < j1 {
                        for i in i0..i1 {
                            let src = (i as isize + di) as usize * w + (j0 as isize + dj) as usize;
                            acc += dot(&go[i * w + j0..i * w + j1], &plane[src..src + (j1 - j0)]);
                        }
                    }
                    dw[((o * c + ch) * k + ki) * k + kj] += acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_conv_input_grad<T: Real>(g: &[T], weight: &[T], c: usize, oc: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let n = h * w;
    let pad = (k / 2) as isize;
    for o in 0..oc {
        let go = &g[o * n..(o + 1) * n];
        for ch in 0..c {
            let plane = &mut dx[ch * n..(ch + 1) * n];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = weight[((o * c + ch) * k + ki) * k + kj];
                    let (di, dj) = (ki as isize - pad, kj as isize - pad);
                    let (i0, i1, j0, j1) = shifted_window(h, w, di, dj);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let dst = (i as isize + di) as usize * w + (j0 as isize + dj) as usize;
                        for (d, &v) in plane[dst..dst + (j1 - j0)].iter_mut().zip(&go[i * w + j0..i * w + j1]) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pool over a CHW tensor; returns the source index of
/// each output cell.
fn max_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// The im2col matrix `(c·k²) × (h·w)` for a same-padded convolution, or the
/// input itself for 1×1 kernels.
fn patches<'a, T: Real>(x: &'a [T], c: usize, h: usize, w: usize, k: usize, buf: &'a mut Vec<T>) -> &'a [T] {
    if k == 1 {
        return x;
    }
    let n = h * w;
    let pad = (k / 2) as isize;
    buf.clear();
    buf.resize(c * k * k * n, T::ZERO);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * n..(ch + 1) * n];
        for ki in 0..k {
            let di = ki as isize - pad;
            for kj in 0..k {
                let dj = kj as isize - pad;
                let dst = &mut buf[row * n..(row + 1) * n];
                let j0 = (-dj).max(0) as usize;
                let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        continue;
                    }
                    let src = si as usize * w;
                    let sj0 = (j0 as isize + dj) as usize;
                    dst[i * w + j0..i * w + j1].copy_from_slice(&plane[src + sj0..src + sj0 + (j1 - j0)]);
                }
                row += 1;
            }
        }
    }
    buf
}

/// Adjoint of [`patches`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let n = h * w;
    if k == 1 {
        for (d, &v) in dx.iter_mut().zip(cols) {
            *d += v;
        }
        return;
    }
    let pad = (k / 2) as isize;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx[ch * n..(ch + 1) * n];
        for ki in 0..k {
            let di = ki as isize - pad;
            for kj in 0..k {
                let dj = kj as isize - pad;
                let src = &cols[row * n..(row + 1) * n];
                let j0 = (-dj).max(0) as usize;
                let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize || j0 >= j1 {
                        continue;
                    }
                    let base = si as usize * w;
                    let sj0 = (j0 as isize + dj) as usize;
                    for (d, &v) in plane[base + sj0..base + sj0 + (j1 - j0)].iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}
