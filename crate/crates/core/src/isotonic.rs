//! Least-squares monotone (non-decreasing) fit by pool-adjacent-violators.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Unweighted isotonic regression of `raw`.
pub fn pava(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        bail!(Parameter, "isotonic regression of an empty sequence");
    }
    if raw.iter().any(|v| !v.is_finite()) {
        bail!(Parameter, "isotonic regression input must be finite");
    }
    // Each block is (sum, len); a block's fitted value is its mean.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(raw.len());
    for &y in raw {
        blocks.push((y, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            // mean0 > mean1, compared without division
            if s0 * n1 as f64 > s1 * n0 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s0 + s1, n0 + n1);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for (s, n) in blocks {
        let m = s / n as f64;
        out.extend(core::iter::repeat(m).take(n));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountEntry {
    pub gdd: f64,
    pub raw: f64,
    pub corrected: f64,
}

/// Count predictions of one row segment over the season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSeries {
    pub segment_id: alloc::string::String,
    entries: Vec<CountEntry>,
}

impl CountSeries {
    /// Sorts `(gdd, raw count)` observations by thermal time and fits the
    /// monotone correction.
    pub fn fit(segment_id: impl Into<alloc::string::String>, mut observations: Vec<(f64, f64)>) -> Result<Self> {
        observations.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in observations.windows(2) {
            if w[0].0 == w[1].0 {
                bail!(Parameter, "two observations at thermal time {}", w[0].0);
            }
        }
        let raw: Vec<f64> = observations.iter().map(|o| o.1).collect();
        let fitted = pava(&raw)?;
        let entries = observations
            .iter()
            .zip(fitted)
            .map(|(&(gdd, raw), corrected)| CountEntry { gdd, raw, corrected })
            .collect();
        Ok(Self { segment_id: segment_id.into(), entries })
    }

    pub fn entries(&self) -> &[CountEntry] {
        &self.entries
    }
}
