//! On-disk formats: PDM1 rasters, PCNN checkpoints, PNG images, annotation
//! and segmentation JSON, weather and count CSV files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use panicle_core::convnet::{ModelState, NetConfig};
use panicle_core::density::AnnotationSet;
use panicle_core::slic::{SuperpixelLevel, SuperpixelMap};
use panicle_core::thermal::{WeatherRecord, WeatherSeries};
use panicle_core::RasterGrid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PDM_MAGIC: &[u8; 4] = b"PDM1";
pub const PCNN_MAGIC: &[u8; 4] = b"PCNN";
pub const PCNN_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers see
/// either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err(format!("truncated while reading {what}"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8], what: &str) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().expect("4 bytes")))
}

fn take_f32s(bytes: &mut &[u8], n: usize, what: &str) -> std::result::Result<Vec<f32>, String> {
    let raw = take(bytes, n.checked_mul(4).ok_or("size overflow")?, what)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

pub fn encode_pdm(grid: &RasterGrid) -> Vec<u8> {
    let (h, w, c) = grid.shape();
    let mut out = Vec::with_capacity(16 + 4 * grid.data().len());
    out.extend_from_slice(PDM_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_pdm(mut bytes: &[u8]) -> std::result::Result<RasterGrid, String> {
    if take(&mut bytes, 4, "magic")? != PDM_MAGIC {
        return Err("not a PDM1 raster".into());
    }
    let h = take_u32(&mut bytes, "height")? as usize;
    let w = take_u32(&mut bytes, "width")? as usize;
    let c = take_u32(&mut bytes, "channels")? as usize;
    let n = h.checked_mul(w).and_then(|v| v.checked_mul(c)).ok_or("size overflow")?;
    let data = take_f32s(&mut bytes, n, "values")?;
    if !bytes.is_empty() {
        return Err(format!("{} trailing bytes", bytes.len()));
    }
    RasterGrid::from_vec(h, w, c, data.into_iter().map(f64::from).collect()).map_err(|e| e.to_string())
}

pub fn write_pdm(path: &Path, grid: &RasterGrid) -> Result<()> {
    write_atomic(path, &encode_pdm(grid))
}

pub fn read_pdm(path: &Path) -> Result<RasterGrid> {
    decode_pdm(&read_bytes(path)?).map_err(|msg| Error::format(path, msg))
}

/// Header of a checkpoint: the network layout plus training bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(flatten)]
    config: NetConfig,
    seed: u64,
    step: u64,
}

/// `PCNN`, version, length-prefixed JSON header, then per layer the weight,
/// bias and (for normalized layers) BN scale, shift, running mean and
/// running variance as little-endian f32.
pub fn encode_checkpoint(model: &ModelState<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader { config: model.config.clone(), seed: model.seed, step: model.step })
        .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(PCNN_MAGIC);
    out.extend_from_slice(&PCNN_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for layer in &model.layers {
        let mut tensors = vec![&layer.weight, &layer.bias];
        if let Some(bn) = &layer.norm {
            tensors.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
        }
        for t in tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(mut bytes: &[u8]) -> std::result::Result<ModelState<f32>, String> {
    if take(&mut bytes, 4, "magic")? != PCNN_MAGIC {
        return Err("not a PCNN checkpoint".into());
    }
    let version = take_u32(&mut bytes, "version")?;
    if version != PCNN_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = take_u32(&mut bytes, "header length")? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(&mut bytes, len, "header")?).map_err(|e| format!("header: {e}"))?;
    let mut model = ModelState::<f32>::new(header.config, header.seed).map_err(|e| e.to_string())?;
    model.step = header.step;
    for layer in &mut model.layers {
        let mut tensors = vec![&mut layer.weight, &mut layer.bias];
        if let Some(bn) = &mut layer.norm {
            tensors.extend([&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var]);
        }
        for t in tensors {
            let n = t.len();
            *t = take_f32s(&mut bytes, n, "tensor")?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err("non-finite parameter".into());
            }
        }
        if let Some(bn) = &layer.norm {
            if bn.running_var.iter().any(|&v| v <= 0.0) {
                return Err("non-positive running variance".into());
            }
        }
    }
    if !bytes.is_empty() {
        return Err(format!("{} trailing bytes", bytes.len()));
    }
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &ModelState<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    decode_checkpoint(&read_bytes(path)?).map_err(|msg| Error::format(path, msg))
}

/// RGB image with channel values in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<RasterGrid, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    RasterGrid::from_vec(h, w, 3, data).map_err(|e| e.to_string())
}

pub fn encode_png(grid: &RasterGrid) -> std::result::Result<Vec<u8>, String> {
    let (h, w, c) = grid.shape();
    if c != 3 {
        return Err(format!("PNG export needs 3 channels, got {c}"));
    }
    let raw: Vec<u8> = grid.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or("buffer size")?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

pub fn read_png(path: &Path) -> Result<RasterGrid> {
    decode_png(&read_bytes(path)?).map_err(|msg| Error::format(path, msg))
}

pub fn write_png(path: &Path, grid: &RasterGrid) -> Result<()> {
    let bytes = encode_png(grid).map_err(|msg| Error::format(path, msg))?;
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_annotation(path: &Path) -> Result<AnnotationSet> {
    read_json(path)
}

/// Sidecar of a superpixel label raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelSidecar {
    pub n_superpixels: usize,
    pub level: Option<SuperpixelLevel>,
}

fn sidecar_path(pdm: &Path) -> PathBuf {
    pdm.with_extension("json")
}

/// Writes `<base>.pdm` (labels as f32) and `<base>.json`.
pub fn write_superpixels(pdm: &Path, map: &SuperpixelMap) -> Result<()> {
    let labels = map.labels().iter().map(|&l| f64::from(l)).collect();
    let grid = RasterGrid::from_vec(map.height(), map.width(), 1, labels)?;
    write_pdm(pdm, &grid)?;
    write_json(&sidecar_path(pdm), &SuperpixelSidecar { n_superpixels: map.len(), level: map.level() })
}

pub fn read_superpixels(pdm: &Path) -> Result<SuperpixelMap> {
    let grid = read_pdm(pdm)?;
    let side: SuperpixelSidecar = read_json(&sidecar_path(pdm))?;
    if grid.channels() != 1 {
        return Err(Error::format(pdm, "label raster must have one channel"));
    }
    let labels: Vec<u32> = grid.data().iter().map(|&v| v as u32).collect();
    let map = SuperpixelMap::from_labels(grid.height(), grid.width(), labels, side.level)?;
    if map.len() != side.n_superpixels {
        return Err(Error::format(pdm, format!("{} labels, sidecar says {}", map.len(), side.n_superpixels)));
    }
    Ok(map)
}

#[derive(Debug, Deserialize)]
struct WeatherRow {
    date: chrono::NaiveDate,
    tmin_f: f64,
    tmax_f: f64,
}

pub fn parse_weather(text: &str) -> std::result::Result<WeatherSeries, String> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "tmin_f", "tmax_f"] {
        return Err("expected header date,tmin_f,tmax_f".into());
    }
    let mut records = Vec::new();
    for row in rdr.deserialize() {
        let r: WeatherRow = row.map_err(|e| e.to_string())?;
        records.push(WeatherRecord { date: r.date, tmin_f: r.tmin_f, tmax_f: r.tmax_f });
    }
    WeatherSeries::new(records).map_err(|e| e.to_string())
}

pub fn read_weather(path: &Path) -> Result<WeatherSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_weather(&text).map_err(|msg| Error::format(path, msg))
}

/// `segment_id,gdd,raw_count[,isotonic_count]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicRow {
    pub segment_id: String,
    pub gdd: f64,
    pub raw_count: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isotonic_count: Option<f64>,
}

/// One image's counts as emitted by `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image: String,
    pub segment_id: String,
    pub gdd: f64,
    pub raw: f64,
    pub tta: f64,
    pub isotonic: f64,
}

/// `image,count` ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub image: String,
    pub count: f64,
}

/// `segment_id,truth,raw,tta,isotonic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMetricRow {
    pub segment_id: String,
    pub truth: f64,
    pub raw: f64,
    pub tta: f64,
    pub isotonic: f64,
}

/// `alpha,beta,tp,fp,fn,precision,recall`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub alpha: f64,
    pub beta: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
}

impl From<&panicle_core::eval::PrPoint> for PrRow {
    fn from(p: &panicle_core::eval::PrPoint) -> Self {
        Self { alpha: p.alpha, beta: p.beta, tp: p.tp, fp: p.fp, fn_: p.fn_, precision: p.precision, recall: p.recall }
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| Error::format(path, e.to_string()))
}

pub fn encode_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    write_atomic(path, &encode_csv(rows, header))
}

/// Segmentation result of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationFile {
    pub image: String,
    pub alpha: f64,
    pub beta: f64,
    pub clusters: Vec<ClusterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: u32,
    pub superpixels: Vec<u32>,
}

impl SegmentationFile {
    pub fn new(image: &str, alpha: f64, beta: f64, assignment: &panicle_core::instseg::ClusterAssignment) -> Self {
        let clusters =
            assignment.clusters().into_iter().map(|(id, superpixels)| ClusterEntry { id, superpixels }).collect();
        Self { image: image.to_string(), alpha, beta, clusters }
    }
}
