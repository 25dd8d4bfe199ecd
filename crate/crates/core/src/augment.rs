//! Eight-fold dihedral augmentation for training and rotation/reflection
//! invariant counting at test time.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::convnet::{ModelState, Real};
use crate::error::Result;
use crate::grid::{dihedral_transform, Dihedral, RasterGrid};

/// Anything that maps an image to a count.
pub trait CountModel {
    fn predict_count(&self, input: &RasterGrid) -> Result<f64>;
}

impl<T: Real> CountModel for ModelState<T> {
    fn predict_count(&self, input: &RasterGrid) -> Result<f64> {
        ModelState::predict_count(self, input)
    }
}

impl<F: Fn(&RasterGrid) -> f64> CountModel for F {
    fn predict_count(&self, input: &RasterGrid) -> Result<f64> {
        Ok(self(input))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountStatistic {
    #[default]
    Median,
    Mean,
}

/// All eight variants of every pair, the same element applied to input and
/// target. Variant order per pair follows [`Dihedral::all`].
pub fn augment_dataset(pairs: &[(RasterGrid, RasterGrid)]) -> Vec<(RasterGrid, RasterGrid)> {
    let mut out = Vec::with_capacity(pairs.len() * 8);
    for (x, t) in pairs {
        for e in Dihedral::all() {
            out.push((dihedral_transform(x, e), dihedral_transform(t, e)));
        }
    }
    out
}

/// Counts of the eight dihedral variants of `input`, ascending.
pub fn variant_counts(model: &impl CountModel, input: &RasterGrid) -> Result<Vec<f64>> {
    let mut counts = Dihedral::all()
        .map(|e| model.predict_count(&dihedral_transform(input, e)))
        .collect::<Result<Vec<f64>>>()?;
    counts.sort_by(f64::total_cmp);
    Ok(counts)
}

/// Aggregates sorted values so the result depends only on the multiset.
pub fn aggregate(sorted: &[f64], statistic: CountStatistic) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    match statistic {
        CountStatistic::Median if n % 2 == 0 => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
        CountStatistic::Median => sorted[n / 2],
        CountStatistic::Mean => sorted.iter().sum::<f64>() / n as f64,
    }
}

/// Test-time augmented count.
pub fn tta_count(model: &impl CountModel, input: &RasterGrid, statistic: CountStatistic) -> Result<f64> {
    Ok(aggregate(&variant_counts(model, input)?, statistic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn labeled(h: usize, w: usize) -> RasterGrid {
        RasterGrid::from_fn(h, w, 1, |i, j, _| (i * w + j) as f64)
    }

    #[test]
    fn eight_variants_per_pair() {
        let pair = (labeled(4, 4), labeled(2, 2));
        let out = augment_dataset(core::slice::from_ref(&pair));
        assert_eq!(out.len(), 8);
        assert_eq!(out[0], pair);
        for (_, t) in &out {
            assert_eq!(t.total(), pair.1.total());
        }
    }

    #[test]
    fn invariant_model_is_unchanged() {
        let model = |g: &RasterGrid| g.total();
        let x = labeled(5, 3);
        assert_eq!(tta_count(&model, &x, CountStatistic::Median).unwrap(), x.total());
        assert_eq!(tta_count(&model, &x, CountStatistic::Mean).unwrap(), x.total());
    }

    #[test]
    fn statistics_on_stub_counts() {
        let vals = vec![57.0, 58.0, 59.0, 60.0, 61.0, 62.0, 63.0, 64.0];
        assert_eq!(aggregate(&vals, CountStatistic::Median), 60.5);
        assert_eq!(aggregate(&vals, CountStatistic::Mean), 60.5);
        assert_eq!(aggregate(&[3.0, 1.0, 2.0][..], CountStatistic::Median), 1.0);
    }

    #[test]
    fn stub_model_sees_each_variant() {
        let x = RasterGrid::from_fn(2, 3, 1, |i, j, _| (i * 3 + j) as f64);
        let probe = |g: &RasterGrid| 57.0 + g.get(0, 0, 0) + if g.height() == 3 { 0.5 } else { 0.0 };
        let counts = variant_counts(&probe, &x).unwrap();
        assert_eq!(counts.len(), 8);
        let t = tta_count(&probe, &x, CountStatistic::Median).unwrap();
        assert_eq!(t, (counts[3] + counts[4]) / 2.0);
    }
}
