use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelState, Real, BN_MOMENTUM};
use crate::error::{bail, Error, Result};
use crate::grid::{dihedral_transform, Dihedral, RasterGrid};

/// Minibatch SGD with momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw a random dihedral element per sample and epoch.
    pub random_dihedral: bool,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Replace the running batch-norm statistics after the last epoch with
    /// averages over the whole training set (see [`recalibrate_batch_norm`]).
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, momentum: 0.9, batch_size: 8, seed: 0, random_dihedral: false, lr_decay: 1.0, recalibrate_bn: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains `model` in place on `(input, target)` pairs whose targets already
/// have the network's output resolution.
pub fn train<T: Real>(
    model: &mut ModelState<T>,
    dataset: &[(RasterGrid, RasterGrid)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_progress(model, dataset, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after each epoch.
pub fn train_with_progress<T: Real>(
    model: &mut ModelState<T>,
    dataset: &[(RasterGrid, RasterGrid)],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        bail!(Parameter, "training set is empty");
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        bail!(Parameter, "batch size, learning rate or momentum out of range");
    }
    let square = dataset.iter().all(|(x, _)| x.height() == x.width());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut velocity: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::ZERO; p.len()]).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, targets): (Vec<RasterGrid>, Vec<RasterGrid>) = chunk
                .iter()
                .map(|&k| {
                    let (x, t) = &dataset[k];
                    if cfg.random_dihedral {
                        let e = if square { rng.gen_range(0..8u8) } else { 2 * rng.gen_range(0..4u8) };
                        let e = Dihedral::new(e).expect("in range");
                        (dihedral_transform(x, e), dihedral_transform(t, e))
                    } else {
                        (x.clone(), t.clone())
                    }
                })
                .unzip();
            let (loss, grads, stats) = model.loss_grad_stats(&inputs, &targets)?;
            model.step += 1;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure { step: model.step, loss });
            }
            epoch_loss += loss;
            batches += 1;

            let (mu, rate) = (T::from_f64(cfg.momentum), T::from_f64(lr));
            for ((param, vel), grad) in model.params_mut().into_iter().zip(&mut velocity).zip(&grads.tensors) {
                for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = mu * *v - rate * g;
                    *p += *v;
                }
            }

            let m = T::from_f64(BN_MOMENTUM);
            for (layer, st) in model.layers.iter_mut().zip(&stats) {
                if let Some(bn) = &mut layer.norm {
                    let unbias = T::from_f64(st.count as f64 / (st.count.max(2) - 1) as f64);
                    for c in 0..bn.running_mean.len() {
                        bn.running_mean[c] = (T::ONE - m) * bn.running_mean[c] + m * st.mean[c];
                        bn.running_var[c] = (T::ONE - m) * bn.running_var[c] + m * st.var[c] * unbias;
                    }
                }
            }
        }
        let mean = epoch_loss / batches as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean);
        lr *= cfg.lr_decay;
    }
    if cfg.recalibrate_bn && cfg.epochs > 0 {
        let inputs: Vec<RasterGrid> = dataset.iter().map(|(x, _)| x.clone()).collect();
        recalibrate_batch_norm(model, &inputs, cfg.batch_size)?;
    }
    report.steps = model.step;
    Ok(report)
}

/// Sets every running mean to the average batch mean, and every running
/// variance to the average unbiased batch variance, over `inputs` taken in
/// order in batches of `batch_size` with the current weights.
pub fn recalibrate_batch_norm<T: Real>(model: &mut ModelState<T>, inputs: &[RasterGrid], batch_size: usize) -> Result<()> {
    if inputs.is_empty() || batch_size == 0 {
        bail!(Parameter, "recalibration needs inputs and a positive batch size");
    }
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> =
        model.layers.iter().map(|l| l.norm.as_ref().map(|bn| (vec![0.0; bn.gamma.len()], vec![0.0; bn.gamma.len()]))).collect();
    let mut batches = 0usize;
    for chunk in inputs.chunks(batch_size) {
        let stats = model.batch_stats(chunk)?;
        for (acc, st) in sums.iter_mut().zip(&stats) {
            if let Some((m, v)) = acc {
                let unbias = st.count as f64 / (st.count.max(2) - 1) as f64;
                for c in 0..m.len() {
                    m[c] += st.mean[c].to_f64();
                    v[c] += st.var[c].to_f64() * unbias;
                }
            }
        }
        batches += 1;
    }
    for (layer, acc) in model.layers.iter_mut().zip(sums) {
        if let (Some(bn), Some((m, v))) = (&mut layer.norm, acc) {
            for c in 0..m.len() {
                bn.running_mean[c] = T::from_f64(m[c] / batches as f64);
                bn.running_var[c] = T::from_f64(v[c] / batches as f64);
            }
        }
    }
    Ok(())
}
