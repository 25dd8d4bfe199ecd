//! Training, prediction and evaluation stages over a [`Dataset`].

use std::collections::BTreeMap;
use std::path::Path;

use panicle_core::augment::{tta_count, variant_counts};
use panicle_core::convnet::{train_with_progress, ModelState, TrainConfig, TrainReport};
use panicle_core::density::{
    build_dot_density, detection_from_masks, region_density_from_masks, AnnotationSet, DensityTarget,
};
use panicle_core::eval::{mae, r_squared, PixelSet, SegmentationCase};
use panicle_core::grid::{mean_pool, sum_pool};
use panicle_core::instseg::{upsample_density, upsample_detection};
use panicle_core::isotonic::CountSeries;
use panicle_core::slic::SuperpixelLevel;
use panicle_core::thermal::{thermal_channel, ThermalTime};
use panicle_core::RasterGrid;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TargetSource};
use crate::dataset::{Dataset, ImageMeta};
use crate::error::{Error, Result};
use crate::formats::{CountMetricRow, PredictionRow};

/// One image with whatever supervision the dataset holds for it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub meta: ImageMeta,
    pub image: RasterGrid,
    pub masks: Option<Vec<Vec<usize>>>,
    pub dots: Option<Vec<panicle_core::PixelCoord>>,
}

impl Sample {
    pub fn gdd(&self) -> f64 {
        self.meta.gdd.unwrap_or(0.0)
    }

    /// Annotated count: instances, dots, or the stored count.
    pub fn count(&self) -> Option<f64> {
        self.masks
            .as_ref()
            .map(|m| m.len() as f64)
            .or_else(|| self.dots.as_ref().map(|d| d.len() as f64))
            .or(self.meta.count)
    }
}

pub fn load_samples(ds: &Dataset, cfg: &Config) -> Result<Vec<Sample>> {
    ds.ids()?
        .into_iter()
        .map(|id| {
            Ok(Sample {
                meta: ds.meta(&id)?,
                image: ds.image(&id)?,
                masks: ds.instance_masks(&id, &cfg.slic)?,
                dots: ds.dots(&id)?,
            })
        })
        .collect()
}

/// Splits by `split.test_groups`; with no test groups everything is both.
pub fn split<'a>(samples: &'a [Sample], cfg: &Config) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let groups = &cfg.split.test_groups;
    if groups.is_empty() {
        let all: Vec<&Sample> = samples.iter().collect();
        return (all.clone(), all);
    }
    samples.iter().partition(|s| !groups.contains(&s.meta.group))
}

/// Zero-pads the bottom and right edges up to a multiple of `m`.
pub fn pad_to_multiple(grid: &RasterGrid, m: usize) -> RasterGrid {
    let (h, w, c) = grid.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return grid.clone();
    }
    let mut out = RasterGrid::zeros(ph, pw, c);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                out.set(i, j, k, grid.get(i, j, k));
            }
        }
    }
    out
}

/// Top-left `h × w` window.
pub fn crop(grid: &RasterGrid, h: usize, w: usize) -> RasterGrid {
    RasterGrid::from_fn(h, w, grid.channels(), |i, j, k| grid.get(i, j, k))
}

/// RGB plus the optional thermal channel, padded to the network stride.
pub fn detect_input(cfg: &Config, image: &RasterGrid, gdd: f64, stride: usize) -> Result<RasterGrid> {
    if image.channels() != 3 {
        return Err(Error::Core(panicle_core::Error::Shape(format!("expected an RGB image, got {} channels", image.channels()))));
    }
    let mut parts = vec![image.clone()];
    if cfg.net.thermal {
        parts.push(thermal_channel(ThermalTime(gdd), (image.height(), image.width()))?);
    }
    let refs: Vec<&RasterGrid> = parts.iter().collect();
    Ok(pad_to_multiple(&RasterGrid::stack(&refs)?, stride))
}

/// Full-resolution detection probabilities for `image`.
pub fn predict_detection(detector: &ModelState, cfg: &Config, image: &RasterGrid, gdd: f64) -> Result<RasterGrid> {
    let f = detector.config.downsample();
    let low = detector.forward(&detect_input(cfg, image, gdd, f)?, false)?.map(|v| v.clamp(0.0, 1.0));
    Ok(crop(&upsample_detection(&low, f)?, image.height(), image.width()))
}

/// Count-network input: the detection input plus, when configured, the
/// detection map (from `detector`, else from `fallback`).
pub fn count_input(
    cfg: &Config,
    image: &RasterGrid,
    gdd: f64,
    detector: Option<&ModelState>,
    fallback: Option<&RasterGrid>,
    stride: usize,
) -> Result<RasterGrid> {
    let base = detect_input(cfg, image, gdd, 1)?;
    if !cfg.count.detection_channel {
        return Ok(pad_to_multiple(&base, stride));
    }
    let det = match (detector, fallback) {
        (Some(d), _) => predict_detection(d, cfg, image, gdd)?,
        (None, Some(f)) => f.clone(),
        (None, None) => return Err(Error::Usage("count network expects a detection channel; pass a detection model".into())),
    };
    Ok(pad_to_multiple(&RasterGrid::stack(&[&base, &det])?, stride))
}

/// Detection target: smoothed union of the instance masks.
pub fn detection_target(cfg: &Config, s: &Sample) -> Result<Option<DensityTarget>> {
    let shape = (s.image.height(), s.image.width());
    s.masks.as_ref().map(|m| detection_from_masks(shape, m, cfg.density.sigma_det)).transpose().map_err(Into::into)
}

/// Count target per `density.target`.
pub fn density_target(cfg: &Config, s: &Sample) -> Result<Option<DensityTarget>> {
    let shape = (s.image.height(), s.image.width());
    Ok(match cfg.density.target {
        TargetSource::Region => s
            .masks
            .as_ref()
            .map(|m| region_density_from_masks(shape, m, cfg.density.sigma_region))
            .transpose()?,
        TargetSource::Dot => s
            .dots
            .as_ref()
            .map(|d| {
                let ann = AnnotationSet::dots(s.meta.id.clone(), SuperpixelLevel::Small, d.clone());
                build_dot_density(&ann, shape, cfg.density.sigma_dot)
            })
            .transpose()?,
    })
}

fn train_cfg(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// Trains the detection network on every sample with instance masks.
pub fn train_detector(
    cfg: &Config,
    samples: &[&Sample],
    progress: impl FnMut(usize, f64),
) -> Result<(ModelState, TrainReport)> {
    let net = cfg.net.config(cfg.detect_channels());
    let f = net.downsample();
    let mut pairs = Vec::new();
    for s in samples {
        if let Some(t) = detection_target(cfg, s)? {
            let x = detect_input(cfg, &s.image, s.gdd(), f)?;
            pairs.push((x, mean_pool(&pad_to_multiple(&t.grid, f), f)?));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Usage("no images with region annotations to train the detector".into()));
    }
    let mut model = ModelState::new(net, cfg.seed)?.with_zero_output();
    let report = train_with_progress(&mut model, &pairs, &train_cfg(&cfg.train_detect, cfg.seed), progress)?;
    Ok((model, report))
}

/// Count-network training pairs. The detection channel comes from
/// `detector` when given, else from the sample's own detection target.
pub fn count_pairs(
    cfg: &Config,
    samples: &[&Sample],
    detector: Option<&ModelState>,
) -> Result<Vec<(RasterGrid, RasterGrid)>> {
    let net = cfg.net.config(cfg.count_channels());
    let f = net.downsample();
    let mut pairs = Vec::new();
    for s in samples {
        let Some(t) = density_target(cfg, s)? else { continue };
        let oracle = if cfg.count.detection_channel && detector.is_none() {
            detection_target(cfg, s)?.map(|d| d.grid)
        } else {
            None
        };
        if cfg.count.detection_channel && detector.is_none() && oracle.is_none() {
            continue;
        }
        let x = count_input(cfg, &s.image, s.gdd(), detector, oracle.as_ref(), f)?;
        pairs.push((x, sum_pool(&pad_to_multiple(&t.grid, f), f)?));
    }
    Ok(pairs)
}

pub fn train_counter(
    cfg: &Config,
    samples: &[&Sample],
    detector: Option<&ModelState>,
    progress: impl FnMut(usize, f64),
) -> Result<(ModelState, TrainReport)> {
    let pairs = count_pairs(cfg, samples, detector)?;
    if pairs.is_empty() {
        return Err(Error::Usage("no annotated images to train the count network".into()));
    }
    let net = cfg.net.config(cfg.count_channels());
    let mut model = ModelState::new(net, cfg.seed.wrapping_add(1))?.with_zero_output();
    let report =
        train_with_progress(&mut model, &pairs, &train_cfg(&cfg.train_count, cfg.seed.wrapping_add(1)), progress)?;
    Ok((model, report))
}

/// Raw, test-time augmented and per-segment isotonic counts.
pub fn predict_counts(
    cfg: &Config,
    counter: &ModelState,
    detector: Option<&ModelState>,
    samples: &[&Sample],
) -> Result<Vec<PredictionRow>> {
    let f = counter.config.downsample();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let x = count_input(cfg, &s.image, s.gdd(), detector, None, f)?;
        let raw = counter.predict_count(&x)?;
        let tta = tta_count(counter, &x, cfg.count.statistic)?;
        rows.push(PredictionRow {
            image: s.meta.id.clone(),
            segment_id: s.meta.segment_id.clone(),
            gdd: s.gdd(),
            raw,
            tta,
            isotonic: tta,
        });
    }
    apply_isotonic(&mut rows)?;
    Ok(rows)
}

/// Replaces `isotonic` with the monotone fit of `tta` within each segment.
pub fn apply_isotonic(rows: &mut [PredictionRow]) -> Result<()> {
    let mut by_segment: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        by_segment.entry(r.segment_id.clone()).or_default().push(k);
    }
    for (seg, idx) in by_segment {
        let series = CountSeries::fit(seg, idx.iter().map(|&k| (rows[k].gdd, rows[k].tta)).collect())?;
        for &k in &idx {
            let e = series.entries().iter().find(|e| e.gdd == rows[k].gdd).expect("fitted every observation");
            rows[k].isotonic = e.corrected;
        }
    }
    Ok(())
}

/// Spread of the eight dihedral counts, for diagnostics.
pub fn dihedral_spread(counter: &ModelState, input: &RasterGrid) -> Result<(f64, f64)> {
    let v = variant_counts(counter, input)?;
    Ok((v[0], v[7]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub images: usize,
    pub mae_raw: f64,
    pub mae_tta: f64,
    pub mae_isotonic: f64,
    pub r2_raw: Option<f64>,
    pub r2_tta: Option<f64>,
    pub r2_isotonic: Option<f64>,
}

/// Count metrics against `truth` (image id → count); images without a
/// truth value are skipped.
pub fn count_metrics(rows: &[PredictionRow], truth: &BTreeMap<String, f64>) -> Result<(CountSummary, Vec<CountMetricRow>)> {
    let matched: Vec<(&PredictionRow, f64)> =
        rows.iter().filter_map(|r| truth.get(&r.image).map(|&t| (r, t))).collect();
    let t: Vec<f64> = matched.iter().map(|m| m.1).collect();
    let col = |f: fn(&PredictionRow) -> f64| matched.iter().map(|m| f(m.0)).collect::<Vec<f64>>();
    let (raw, tta, iso) = (col(|r| r.raw), col(|r| r.tta), col(|r| r.isotonic));
    let summary = CountSummary {
        images: t.len(),
        mae_raw: mae(&raw, &t)?,
        mae_tta: mae(&tta, &t)?,
        mae_isotonic: mae(&iso, &t)?,
        r2_raw: r_squared(&raw, &t).ok(),
        r2_tta: r_squared(&tta, &t).ok(),
        r2_isotonic: r_squared(&iso, &t).ok(),
    };
    let per_row = matched
        .iter()
        .map(|(r, t)| CountMetricRow {
            segment_id: r.segment_id.clone(),
            truth: *t,
            raw: r.raw,
            tta: r.tta,
            isotonic: r.isotonic,
        })
        .collect();
    Ok((summary, per_row))
}

/// Full-resolution region density predicted by the count network.
pub fn predict_region(
    cfg: &Config,
    counter: &ModelState,
    detector: Option<&ModelState>,
    detection: Option<&RasterGrid>,
    image: &RasterGrid,
    gdd: f64,
) -> Result<RasterGrid> {
    let f = counter.config.downsample();
    let x = count_input(cfg, image, gdd, detector, detection, f)?;
    let low = counter.forward(&x, false)?;
    Ok(crop(&upsample_density(&low, f)?, image.height(), image.width()))
}

/// Detection and region maps from the annotation itself.
pub fn oracle_maps(cfg: &Config, s: &Sample) -> Result<Option<(RasterGrid, RasterGrid)>> {
    let Some(masks) = &s.masks else { return Ok(None) };
    let shape = (s.image.height(), s.image.width());
    let det = detection_from_masks(shape, masks, cfg.density.sigma_det)?.grid;
    let region = region_density_from_masks(shape, masks, cfg.density.sigma_region)?.grid;
    Ok(Some((det, region)))
}

/// Which maps drive segmentation.
pub enum MapSource<'a> {
    Oracle,
    Models { detector: &'a ModelState, counter: &'a ModelState },
}

/// Segmentation cases for the samples that carry instance masks.
pub fn segmentation_cases(
    ds: &Dataset,
    cfg: &Config,
    samples: &[&Sample],
    source: &MapSource<'_>,
) -> Result<Vec<SegmentationCase>> {
    let mut cases = Vec::new();
    for s in samples {
        let Some(masks) = &s.masks else { continue };
        let (detection, region) = match source {
            MapSource::Oracle => oracle_maps(cfg, s)?.expect("masks present"),
            MapSource::Models { detector, counter } => {
                let det = predict_detection(detector, cfg, &s.image, s.gdd())?;
                let region = predict_region(cfg, counter, Some(detector), Some(&det), &s.image, s.gdd())?;
                (det, region)
            }
        };
        cases.push(SegmentationCase {
            image: s.image.clone(),
            spmap: ds.superpixels(&s.meta.id, cfg.slic.level, &cfg.slic)?,
            detection,
            region,
            truth: masks.iter().map(|m| PixelSet::new(m.clone())).collect(),
        });
    }
    Ok(cases)
}

/// Run provenance written next to every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &Config) -> Self {
        Self {
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    /// Writes `<stage>.manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::formats::write_json(&dir.join(format!("{}.manifest.json", self.stage)), self)
    }
}
