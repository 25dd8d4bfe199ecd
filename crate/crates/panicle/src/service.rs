//! HTTP/JSON annotation service.
//!
//! | Method | Path | Response |
//! |---|---|---|
//! | GET | `/images` | `[ImageMeta]` |
//! | GET | `/images/{id}` | PNG bytes |
//! | GET | `/images/{id}/meta` | `ImageInfo` |
//! | GET | `/images/{id}/superpixels?level=` | `SuperpixelPayload` |
//! | GET | `/images/{id}/guess?alpha=&level=` | `GuessPayload` |
//! | GET | `/images/{id}/annotation?level=` | `StoredAnnotation` |
//! | PUT | `/images/{id}/annotation` | `AnnotationWrite` in, `{"revision": n}` out |
//! | GET | `/export?level=` | `[ExportEntry]` |
//! | GET | `/export/{id}?level=` | PDM1 bytes of the density target |
//!
//! Errors are `{"error": message}` with status 400 (malformed id, level or
//! alpha), 404 (unknown image or annotation), 409 (stale revision, no
//! model loaded) or 422 (annotation does not validate).

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use panicle_core::convnet::ModelState;
use panicle_core::density::{build_dot_density, build_region_density, AnnotationMode, AnnotationSet, DensityTarget};
use panicle_core::instseg::detect_superpixels;
use panicle_core::slic::{SuperpixelLevel, SuperpixelMap};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{valid_id, Dataset, ImageMeta, StoredAnnotation};
use crate::error::Error;
use crate::formats;
use crate::pipeline;

pub struct AppState {
    pub dataset: Dataset,
    pub config: Config,
    pub model: Option<ModelState>,
    superpixels: Mutex<HashMap<(String, SuperpixelLevel), Arc<SuperpixelMap>>>,
    writes: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(dataset: Dataset, config: Config, model: Option<ModelState>) -> Self {
        Self { dataset, config, model, superpixels: Mutex::default(), writes: tokio::sync::Mutex::new(()) }
    }

    fn superpixels(&self, id: &str, level: SuperpixelLevel) -> Result<Arc<SuperpixelMap>, ApiError> {
        let key = (id.to_string(), level);
        if let Some(m) = self.superpixels.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let map = Arc::new(self.dataset.superpixels(id, level, &self.config.slic)?);
        self.superpixels.lock().expect("cache lock").entry(key).or_insert(map.clone());
        Ok(map)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Core(panicle_core::Error::Annotation(_) | panicle_core::Error::Shape(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<panicle_core::Error> for ApiError {
    fn from(e: panicle_core::Error) -> Self {
        Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;
type Params = Query<HashMap<String, String>>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(image_png))
        .route("/images/{id}/meta", get(image_meta))
        .route("/images/{id}/superpixels", get(superpixels))
        .route("/images/{id}/guess", get(guess))
        .route("/images/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/export", get(export))
        .route("/export/{id}", get(export_one))
        .with_state(state)
}

/// Blocks the calling thread serving on `0.0.0.0:port`.
pub fn serve(port: u16, dataset: Dataset, config: Config, model: Option<ModelState>) -> crate::Result<()> {
    let state = Arc::new(AppState::new(dataset, config, model));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(std::path::Path::new("tokio runtime"), e))?;
    rt.block_on(async move {
        let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(std::path::Path::new(&addr.to_string()), e))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state)).await.map_err(|e| Error::io(std::path::Path::new(&addr.to_string()), e))
    })
}

fn checked_id(state: &AppState, id: &str) -> ApiResult<()> {
    if !valid_id(id) {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid image id {id:?}")));
    }
    if !state.dataset.contains(id) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {id:?}")));
    }
    Ok(())
}

fn level_param(state: &AppState, q: &HashMap<String, String>) -> ApiResult<SuperpixelLevel> {
    match q.get("level") {
        None => Ok(state.config.slic.level),
        Some(s) => SuperpixelLevel::parse(s)
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("unknown level {s:?} (small, medium, large)"))),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn list_images(State(state): State<Shared>) -> ApiResult<Json<Vec<ImageMeta>>> {
    blocking(move || {
        let ids = state.dataset.ids()?;
        Ok(Json(ids.iter().map(|id| state.dataset.meta(id)).collect::<crate::Result<Vec<_>>>()?))
    })
    .await
}

async fn image_png(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    checked_id(&state, &id)?;
    let bytes = formats::read_bytes(&state.dataset.image_path(&id))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    #[serde(flatten)]
    pub meta: ImageMeta,
    pub height: usize,
    pub width: usize,
    /// Levels with a stored annotation.
    pub annotated_levels: Vec<SuperpixelLevel>,
}

async fn image_meta(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ImageInfo>> {
    checked_id(&state, &id)?;
    blocking(move || {
        let img = state.dataset.image(&id)?;
        let annotated_levels =
            SuperpixelLevel::ALL.into_iter().filter(|&l| state.dataset.annotation_path(&id, l).exists()).collect();
        Ok(Json(ImageInfo { meta: state.dataset.meta(&id)?, height: img.height(), width: img.width(), annotated_levels }))
    })
    .await
}

/// Superpixel map for rendering: labels run-length encoded in row-major
/// order as `[label, run]` pairs, plus the closed outline of every
/// superpixel as `[row, col]` pixel-corner vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelPayload {
    pub image: String,
    pub level: SuperpixelLevel,
    pub height: usize,
    pub width: usize,
    pub n_superpixels: usize,
    pub rle: Vec<[u32; 2]>,
    pub boundaries: Vec<Boundary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub label: u32,
    pub polylines: Vec<Vec<[usize; 2]>>,
}

pub fn run_length_encode(labels: &[u32]) -> Vec<[u32; 2]> {
    let mut out: Vec<[u32; 2]> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some([last, run]) if *last == l => *run += 1,
            _ => out.push([l, 1]),
        }
    }
    out
}

pub fn run_length_decode(rle: &[[u32; 2]]) -> Vec<u32> {
    rle.iter().flat_map(|&[l, n]| std::iter::repeat_n(l, n as usize)).collect()
}

/// Outlines of every superpixel. Each loop keeps its region on the right
/// and drops vertices where the direction does not change.
pub fn boundaries(map: &SuperpixelMap) -> Vec<Boundary> {
    let (h, w) = (map.height(), map.width());
    let lab = |i: isize, j: isize| -> Option<u32> {
        (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| map.label(i as usize, j as usize))
    };
    // directed edges between pixel corners, per label
    let mut edges: Vec<BTreeMap<[usize; 2], Vec<[usize; 2]>>> = vec![BTreeMap::new(); map.len()];
    for i in 0..h {
        for j in 0..w {
            let l = map.label(i, j);
            let (ii, jj) = (i as isize, j as isize);
            let e = &mut edges[l as usize];
            if lab(ii - 1, jj) != Some(l) {
                e.entry([i, j]).or_default().push([i, j + 1]);
            }
            if lab(ii, jj + 1) != Some(l) {
                e.entry([i, j + 1]).or_default().push([i + 1, j + 1]);
            }
            if lab(ii + 1, jj) != Some(l) {
                e.entry([i + 1, j + 1]).or_default().push([i + 1, j]);
            }
            if lab(ii, jj - 1) != Some(l) {
                e.entry([i + 1, j]).or_default().push([i, j]);
            }
        }
    }
    edges
        .into_iter()
        .enumerate()
        .map(|(label, mut e)| {
            let mut polylines = Vec::new();
            while let Some((&start, _)) = e.iter().next() {
                let mut loop_pts = vec![start];
                let mut cur = start;
                loop {
                    let outs = e.get_mut(&cur).expect("every vertex on a loop has an outgoing edge");
                    let next = outs.pop().expect("non-empty");
                    if outs.is_empty() {
                        e.remove(&cur);
                    }
                    if next == start {
                        break;
                    }
                    loop_pts.push(next);
                    cur = next;
                }
                polylines.push(simplify(loop_pts));
            }
            Boundary { label: label as u32, polylines }
        })
        .collect()
}

fn simplify(pts: Vec<[usize; 2]>) -> Vec<[usize; 2]> {
    let n = pts.len();
    let dir = |a: [usize; 2], b: [usize; 2]| (b[0] as isize - a[0] as isize, b[1] as isize - a[1] as isize);
    (0..n)
        .filter(|&k| dir(pts[(k + n - 1) % n], pts[k]) != dir(pts[k], pts[(k + 1) % n]))
        .map(|k| pts[k])
        .collect()
}

async fn superpixels(State(state): State<Shared>, Path(id): Path<String>, Query(q): Params) -> ApiResult<Json<SuperpixelPayload>> {
    checked_id(&state, &id)?;
    let level = level_param(&state, &q)?;
    blocking(move || {
        let map = state.superpixels(&id, level)?;
        Ok(Json(SuperpixelPayload {
            image: id,
            level,
            height: map.height(),
            width: map.width(),
            n_superpixels: map.len(),
            rle: run_length_encode(map.labels()),
            boundaries: boundaries(&map),
        }))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuessPayload {
    pub image: String,
    pub level: SuperpixelLevel,
    pub alpha: f64,
    pub superpixels: Vec<GuessedSuperpixel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuessedSuperpixel {
    pub id: u32,
    pub probability: f64,
}

async fn guess(State(state): State<Shared>, Path(id): Path<String>, Query(q): Params) -> ApiResult<Json<GuessPayload>> {
    checked_id(&state, &id)?;
    let level = level_param(&state, &q)?;
    let alpha = match q.get("alpha") {
        None => state.config.segment.alpha,
        Some(s) => s
            .parse::<f64>()
            .ok()
            .filter(|a| (0.0..=1.0).contains(a))
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("alpha must be a number in [0, 1], got {s:?}")))?,
    };
    if state.model.is_none() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "no detection model loaded; train one with `panicle train-detect` and restart with --model",
        ));
    }
    blocking(move || {
        let model = state.model.as_ref().expect("checked above");
        let meta = state.dataset.meta(&id)?;
        let img = state.dataset.image(&id)?;
        let det = pipeline::predict_detection(model, &state.config, &img, meta.gdd.unwrap_or(0.0))?;
        let map = state.superpixels(&id, level)?;
        let p = detect_superpixels(&det, &map, alpha)?;
        let superpixels =
            p.ids.iter().zip(&p.probabilities).map(|(&id, &probability)| GuessedSuperpixel { id, probability }).collect();
        Ok(Json(GuessPayload { image: id, level, alpha, superpixels }))
    })
    .await
}

async fn get_annotation(State(state): State<Shared>, Path(id): Path<String>, Query(q): Params) -> ApiResult<Json<StoredAnnotation>> {
    checked_id(&state, &id)?;
    let level = level_param(&state, &q)?;
    state
        .dataset
        .annotation(&id, level)?
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no {level} annotation for {id:?}")))
}

/// Body of `PUT /images/{id}/annotation`. A first write expects revision 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationWrite {
    pub expected_revision: u64,
    pub annotation: AnnotationSet,
}

async fn put_annotation(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<AnnotationWrite>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    checked_id(&state, &id)?;
    let Json(write) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    if write.annotation.image != id {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("annotation names image {:?}, path names {id:?}", write.annotation.image),
        ));
    }
    let _guard = state.writes.lock().await;
    let st = state.clone();
    blocking(move || {
        let level = write.annotation.level;
        let map = st.superpixels(&id, level)?;
        let spmap = (write.annotation.mode == AnnotationMode::Region).then_some(&*map);
        write.annotation.validate(map.height(), map.width(), spmap)?;
        let current = st.dataset.annotation(&id, level)?.map_or(0, |a| a.revision);
        if current != write.expected_revision {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("revision conflict: expected {}, current {current}", write.expected_revision),
            ));
        }
        let revision = current + 1;
        st.dataset.write_annotation(&id, &StoredAnnotation { revision, annotation: write.annotation })?;
        Ok(Json(serde_json::json!({ "revision": revision })))
    })
    .await
}

/// Summary of the target built from one stored annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub image: String,
    pub level: SuperpixelLevel,
    pub mode: AnnotationMode,
    pub revision: u64,
    pub count: f64,
    pub sum: f64,
    pub height: usize,
    pub width: usize,
}

fn export_target(state: &AppState, id: &str, level: SuperpixelLevel) -> ApiResult<Option<(StoredAnnotation, DensityTarget)>> {
    let Some(stored) = state.dataset.annotation(id, level)? else { return Ok(None) };
    let map = state.superpixels(id, level)?;
    let shape = (map.height(), map.width());
    let d = &state.config.density;
    let target = match stored.annotation.mode {
        AnnotationMode::Dot => build_dot_density(&stored.annotation, shape, d.sigma_dot)?,
        AnnotationMode::Region => build_region_density(&stored.annotation, &map, shape, d.sigma_region)?,
    };
    Ok(Some((stored, target)))
}

async fn export(State(state): State<Shared>, Query(q): Params) -> ApiResult<Json<Vec<ExportEntry>>> {
    let levels = match q.get("level") {
        None => SuperpixelLevel::ALL.to_vec(),
        Some(_) => vec![level_param(&state, &q)?],
    };
    blocking(move || {
        let mut out = Vec::new();
        for id in state.dataset.ids()? {
            for &level in &levels {
                if let Some((stored, t)) = export_target(&state, &id, level)? {
                    out.push(ExportEntry {
                        image: id.clone(),
                        level,
                        mode: stored.annotation.mode,
                        revision: stored.revision,
                        count: t.count,
                        sum: t.grid.total(),
                        height: t.grid.height(),
                        width: t.grid.width(),
                    });
                }
            }
        }
        Ok(Json(out))
    })
    .await
}

async fn export_one(State(state): State<Shared>, Path(id): Path<String>, Query(q): Params) -> ApiResult<Response> {
    checked_id(&state, &id)?;
    let level = level_param(&state, &q)?;
    blocking(move || match export_target(&state, &id, level)? {
        Some((_, t)) => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], formats::encode_pdm(&t.grid)).into_response()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("no {level} annotation for {id:?}"))),
    })
    .await
}
