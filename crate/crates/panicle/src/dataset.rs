//! Dataset directory layout.
//!
//! ```text
//! images/<id>.png                     RGB image
//! meta/<id>.json                      ImageMeta
//! truth/<id>.pdm                      optional instance raster (0 = background)
//! truth/<id>.dots.json                optional dot annotation
//! annotations/<id>/<level>.json       StoredAnnotation, one per superpixel level
//! superpixels/<id>.<level>.pdm|json   cached SuperpixelMap
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use panicle_core::density::{AnnotationMode, AnnotationSet, Instance};
use panicle_core::slic::{slic_segment, SuperpixelLevel, SuperpixelMap};
use panicle_core::{PixelCoord, RasterGrid};
use serde::{Deserialize, Serialize};

use crate::config::SlicConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::synth::SynthImage;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageMeta {
    pub id: String,
    pub segment_id: String,
    /// Cross-validation group (plot or field range).
    pub group: String,
    pub variety: Option<String>,
    pub date: Option<chrono::NaiveDate>,
    pub gdd: Option<f64>,
    /// Known panicle count, when available.
    pub count: Option<f64>,
}

/// An annotation together with its write revision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub revision: u64,
    pub annotation: AnnotationSet,
}

/// Image ids may only use `[A-Za-z0-9_.-]` and must not start with a dot.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::io(&root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
        }
        Ok(Self { root })
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("images")).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn meta_path(&self, id: &str) -> PathBuf {
        self.root.join("meta").join(format!("{id}.json"))
    }

    pub fn truth_path(&self, id: &str) -> PathBuf {
        self.root.join("truth").join(format!("{id}.pdm"))
    }

    pub fn truth_dots_path(&self, id: &str) -> PathBuf {
        self.root.join("truth").join(format!("{id}.dots.json"))
    }

    pub fn annotation_path(&self, id: &str, level: SuperpixelLevel) -> PathBuf {
        self.root.join("annotations").join(id).join(format!("{level}.json"))
    }

    pub fn superpixel_path(&self, id: &str, level: SuperpixelLevel) -> PathBuf {
        self.root.join("superpixels").join(format!("{id}.{level}.pdm"))
    }

    /// Ids of all images, sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("images");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                if let Some(id) = path.file_stem().and_then(|s| s.to_str()).filter(|s| valid_id(s)) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn contains(&self, id: &str) -> bool {
        valid_id(id) && self.image_path(id).is_file()
    }

    pub fn image(&self, id: &str) -> Result<RasterGrid> {
        formats::read_png(&self.image_path(id))
    }

    /// Stored metadata, or defaults naming the image after itself.
    pub fn meta(&self, id: &str) -> Result<ImageMeta> {
        let path = self.meta_path(id);
        let mut meta: ImageMeta = if path.exists() { formats::read_json(&path)? } else { ImageMeta::default() };
        meta.id = id.to_string();
        if meta.segment_id.is_empty() {
            meta.segment_id = id.to_string();
        }
        if meta.group.is_empty() {
            meta.group = meta.segment_id.clone();
        }
        Ok(meta)
    }

    pub fn annotation(&self, id: &str, level: SuperpixelLevel) -> Result<Option<StoredAnnotation>> {
        let path = self.annotation_path(id, level);
        if !path.exists() {
            return Ok(None);
        }
        formats::read_json(&path).map(Some)
    }

    pub fn write_annotation(&self, id: &str, stored: &StoredAnnotation) -> Result<()> {
        formats::write_json(&self.annotation_path(id, stored.annotation.level), stored)
    }

    /// Cached superpixels, computed and stored on first use.
    pub fn superpixels(&self, id: &str, level: SuperpixelLevel, slic: &SlicConfig) -> Result<SuperpixelMap> {
        let path = self.superpixel_path(id, level);
        if path.exists() {
            return formats::read_superpixels(&path);
        }
        let map = slic_segment(&self.image(id)?, &slic.params(level))?;
        formats::write_superpixels(&path, &map)?;
        Ok(map)
    }

    /// Ground-truth instance masks from the truth raster.
    pub fn truth_masks(&self, id: &str) -> Result<Option<Vec<Vec<usize>>>> {
        let path = self.truth_path(id);
        if !path.exists() {
            return Ok(None);
        }
        let g = formats::read_pdm(&path)?;
        let mut masks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (p, &v) in g.data().iter().enumerate() {
            if v >= 0.5 {
                masks.entry(v.round() as u32).or_default().push(p);
            }
        }
        Ok(Some(masks.into_values().collect()))
    }

    pub fn truth_dots(&self, id: &str) -> Result<Option<Vec<PixelCoord>>> {
        let path = self.truth_dots_path(id);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(formats::read_annotation(&path)?.dots))
    }

    /// Instance masks for training: the truth raster if present, else the
    /// first region annotation in level order.
    pub fn instance_masks(&self, id: &str, slic: &SlicConfig) -> Result<Option<Vec<Vec<usize>>>> {
        if let Some(m) = self.truth_masks(id)? {
            return Ok(Some(m));
        }
        for level in SuperpixelLevel::ALL {
            if let Some(stored) = self.annotation(id, level)? {
                if stored.annotation.mode == AnnotationMode::Region {
                    let map = self.superpixels(id, level, slic)?;
                    return Ok(Some(stored.annotation.instance_pixels(&map)?));
                }
            }
        }
        Ok(None)
    }

    /// Dots for training: the truth dots if present, else the first dot
    /// annotation in level order.
    pub fn dots(&self, id: &str) -> Result<Option<Vec<PixelCoord>>> {
        if let Some(d) = self.truth_dots(id)? {
            return Ok(Some(d));
        }
        for level in SuperpixelLevel::ALL {
            if let Some(stored) = self.annotation(id, level)? {
                if stored.annotation.mode == AnnotationMode::Dot {
                    return Ok(Some(stored.annotation.dots));
                }
            }
        }
        Ok(None)
    }

    /// Writes a synthetic image with its metadata, truth raster, truth dots
    /// and a region annotation over `level` superpixels (each superpixel
    /// goes to the instance covering most of it, if that is at least half).
    pub fn write_synthetic(&self, s: &SynthImage, level: SuperpixelLevel, slic: &SlicConfig) -> Result<()> {
        formats::write_png(&self.image_path(&s.id), &s.image)?;
        let meta = ImageMeta {
            id: s.id.clone(),
            segment_id: s.segment_id.clone(),
            group: s.segment_id.clone(),
            variety: Some("synthetic".into()),
            date: None,
            gdd: Some(s.gdd),
            count: Some(s.count() as f64),
        };
        formats::write_json(&self.meta_path(&s.id), &meta)?;
        formats::write_pdm(&self.truth_path(&s.id), &s.instance_raster())?;
        formats::write_json(&self.truth_dots_path(&s.id), &AnnotationSet::dots(s.id.clone(), level, s.dots.clone()))?;

        // the ground truth is read back from the stored PNG, as the service will see it
        let map = slic_segment(&self.image(&s.id)?, &slic.params(level))?;
        formats::write_superpixels(&self.superpixel_path(&s.id, level), &map)?;
        let instances = majority_instances(&map, &s.masks);
        let ann = AnnotationSet::regions(s.id.clone(), level, instances);
        self.write_annotation(&s.id, &StoredAnnotation { revision: 0, annotation: ann })
    }
}

/// Superpixel sets per instance by majority overlap; instances that win no
/// superpixel are dropped.
pub fn majority_instances(map: &SuperpixelMap, masks: &[Vec<usize>]) -> Vec<Instance> {
    let mut owner = vec![usize::MAX; map.labels().len()];
    for (k, m) in masks.iter().enumerate() {
        for &p in m {
            owner[p] = k;
        }
    }
    let mut votes: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); map.len()];
    for (p, &l) in map.labels().iter().enumerate() {
        if owner[p] != usize::MAX {
            *votes[l as usize].entry(owner[p]).or_default() += 1;
        }
    }
    let areas = map.areas();
    let mut sets: Vec<Vec<u32>> = vec![Vec::new(); masks.len()];
    for (sp, v) in votes.iter().enumerate() {
        if let Some((&k, &n)) = v.iter().max_by_key(|(k, n)| (**n, std::cmp::Reverse(**k))) {
            if 2 * n >= areas[sp] {
                sets[k].push(sp as u32);
            }
        }
    }
    sets.into_iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(k, superpixels)| Instance { id: k as u32 + 1, superpixels })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_rules() {
        assert!(valid_id("img0001"));
        assert!(valid_id("plot-3_2018.06.01"));
        for bad in ["", "../x", "..", ".hidden", "a/b", "a\\b", "a b", "é"] {
            assert!(!valid_id(bad), "{bad:?}");
        }
    }

    #[test]
    fn majority_vote_assigns_covered_superpixels() {
        let labels: Vec<u32> = (0..16u32).map(|p| (p % 4) / 2 + 2 * (p / 8)).collect();
        let map = SuperpixelMap::from_labels(4, 4, labels, None).unwrap();
        // instance 0 covers superpixel 0 fully, one pixel of superpixel 1
        let masks = vec![vec![0, 1, 4, 5, 2], vec![10, 11, 14, 15, 9]];
        let inst = majority_instances(&map, &masks);
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].superpixels, vec![0]);
        assert_eq!(inst[1].superpixels, vec![3]);
    }
}
