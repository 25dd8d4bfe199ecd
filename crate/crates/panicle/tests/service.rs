use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use panicle::config::Config;
use panicle::dataset::{Dataset, StoredAnnotation};
use panicle::formats;
use panicle::pipeline;
use panicle::service::{router, run_length_decode, AnnotationWrite, AppState, ExportEntry, GuessPayload, SuperpixelPayload};
use panicle::synth::generate;
use panicle_core::convnet::{ModelState, NetConfig, TrainConfig};
use panicle_core::density::{build_region_density, AnnotationSet, Instance};
use panicle_core::instseg::detect_superpixels;
use panicle_core::slic::SuperpixelLevel;
use panicle_core::PixelCoord;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.synth.height = 48;
    cfg.synth.width = 48;
    cfg.synth.min_blobs = 2;
    cfg.synth.max_blobs = 5;
    cfg.net.width_divisor = 25;
    cfg
}

fn dataset(n: usize) -> (tempfile::TempDir, Dataset, Config) {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::create(dir.path()).unwrap();
    let cfg = small_config();
    for s in generate(&cfg.synth, 3, 0, n) {
        ds.write_synthetic(&s, SuperpixelLevel::Small, &cfg.slic).unwrap();
    }
    (dir, ds, cfg)
}

fn app(ds: &Dataset, cfg: &Config, model: Option<ModelState>) -> axum::Router {
    router(Arc::new(AppState::new(ds.clone(), cfg.clone(), model)))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn trained_detector(ds: &Dataset, cfg: &Config) -> ModelState {
    let samples = pipeline::load_samples(ds, cfg).unwrap();
    let refs: Vec<&pipeline::Sample> = samples.iter().collect();
    let mut cfg = cfg.clone();
    cfg.train_detect = TrainConfig { epochs: 3, lr: 0.1, batch_size: 2, ..TrainConfig::default() };
    pipeline::train_detector(&cfg, &refs, |_, _| {}).unwrap().0
}

#[tokio::test]
async fn empty_dataset_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::create(dir.path()).unwrap();
    let (s, v) = call_json(&app(&ds, &Config::default(), None), "GET", "/images", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
    let (s, v) = call_json(&app(&ds, &Config::default(), None), "GET", "/export", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn images_metadata_and_png() {
    let (_d, ds, cfg) = dataset(2);
    let app = app(&ds, &cfg, None);
    let (s, v) = call_json(&app, "GET", "/images", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[0]["id"], "img0000");
    assert!(v[0]["gdd"].as_f64().is_some());

    let (s, bytes) = call(&app, "GET", "/images/img0001", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(formats::decode_png(&bytes).unwrap(), ds.image("img0001").unwrap());

    let (s, v) = call_json(&app, "GET", "/images/img0001/meta", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(48), Some(48)));
    assert_eq!(v["annotated_levels"], json!(["small"]));
}

#[tokio::test]
async fn unknown_and_malicious_ids() {
    let (_d, ds, cfg) = dataset(1);
    let app = app(&ds, &cfg, None);
    assert_eq!(call(&app, "GET", "/images/nope", None).await.0, StatusCode::NOT_FOUND);
    for uri in ["/images/..%2Fmeta%2Fimg0000", "/images/%2E%2E", "/images/..", "/images/.hidden/meta"] {
        let s = call(&app, "GET", uri, None).await.0;
        assert!(s == StatusCode::BAD_REQUEST || s == StatusCode::NOT_FOUND, "{uri}: {s}");
        assert_ne!(s, StatusCode::OK);
    }
    assert_eq!(call(&app, "GET", "/images/..%2Fx", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/images/..%2F..%2Fetc%2Fpasswd/meta", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn superpixels_are_cached_partitions() {
    let (_d, ds, cfg) = dataset(1);
    let app = app(&ds, &cfg, None);
    let mut seen = Vec::new();
    for level in ["small", "medium", "large"] {
        let uri = format!("/images/img0000/superpixels?level={level}");
        let (s, a) = call(&app, "GET", &uri, None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(call(&app, "GET", &uri, None).await.1, a, "repeated request differs");
        let p: SuperpixelPayload = serde_json::from_slice(&a).unwrap();
        let labels = run_length_decode(&p.rle);
        assert_eq!(labels.len(), 48 * 48);
        assert_eq!(labels.iter().map(|&l| l as usize + 1).max(), Some(p.n_superpixels));
        assert_eq!(p.boundaries.len(), p.n_superpixels);
        let area = 48.0 * 48.0 / p.n_superpixels as f64;
        let target = SuperpixelLevel::parse(level).unwrap().target_size() as f64;
        assert!((area - target).abs() <= 0.3 * target, "{level}: mean area {area}");
        seen.push(p.n_superpixels);
    }
    assert!(seen[0] > seen[1] && seen[1] > seen[2]);
    assert_eq!(call(&app, "GET", "/images/img0000/superpixels?level=huge", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn guess_requires_a_model() {
    let (_d, ds, cfg) = dataset(1);
    let (s, v) = call_json(&app(&ds, &cfg, None), "GET", "/images/img0000/guess", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("train"));
}

#[tokio::test]
async fn zero_weight_model_guesses_nothing() {
    let (_d, ds, cfg) = dataset(1);
    let zero = ModelState::new(NetConfig::ours(4).scaled_width(25), 0).unwrap().with_zero_output();
    let (s, v) = call_json(&app(&ds, &cfg, Some(zero)), "GET", "/images/img0000/guess?alpha=0.3", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["superpixels"], json!([]));
}

#[tokio::test]
async fn guesses_match_offline_detection_and_nest_in_alpha() {
    let (_d, ds, cfg) = dataset(4);
    let model = trained_detector(&ds, &cfg);
    let app = app(&ds, &cfg, Some(model.clone()));
    let get = |alpha: f64| {
        let app = app.clone();
        async move {
            let (s, bytes) = call(&app, "GET", &format!("/images/img0002/guess?alpha={alpha}&level=small"), None).await;
            assert_eq!(s, StatusCode::OK);
            serde_json::from_slice::<GuessPayload>(&bytes).unwrap()
        }
    };
    let (lo, hi) = (get(0.3).await, get(0.6).await);
    let lo_ids: Vec<u32> = lo.superpixels.iter().map(|s| s.id).collect();
    assert!(hi.superpixels.iter().all(|s| lo_ids.contains(&s.id)));

    let img = ds.image("img0002").unwrap();
    let gdd = ds.meta("img0002").unwrap().gdd.unwrap();
    let det = pipeline::predict_detection(&model, &cfg, &img, gdd).unwrap();
    let map = ds.superpixels("img0002", SuperpixelLevel::Small, &cfg.slic).unwrap();
    let offline = detect_superpixels(&det, &map, 0.3).unwrap();
    assert_eq!(lo_ids, offline.ids);
    let probs: Vec<f64> = lo.superpixels.iter().map(|s| s.probability).collect();
    assert_eq!(probs, offline.probabilities);

    assert_eq!(call(&app, "GET", "/images/img0002/guess?alpha=abc", None).await.0, StatusCode::BAD_REQUEST);
}

fn region_write(expected: u64, level: SuperpixelLevel, instances: Vec<Instance>) -> Value {
    serde_json::to_value(AnnotationWrite {
        expected_revision: expected,
        annotation: AnnotationSet::regions("img0000", level, instances),
    })
    .unwrap()
}

#[tokio::test]
async fn optimistic_annotation_writes() {
    let (_d, ds, cfg) = dataset(1);
    let app = app(&ds, &cfg, None);
    let level = SuperpixelLevel::Medium;
    let inst = vec![Instance { id: 1, superpixels: vec![0, 1] }, Instance { id: 2, superpixels: vec![5] }];
    let (s, v) = call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(0, level, inst.clone()))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 1);

    let stale = vec![Instance { id: 1, superpixels: vec![3] }];
    let (s, _) = call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(0, level, stale))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = call_json(&app, "GET", "/images/img0000/annotation?level=medium", None).await;
    assert_eq!(s, StatusCode::OK);
    let stored: StoredAnnotation = serde_json::from_value(v).unwrap();
    assert_eq!(stored.revision, 1);
    assert_eq!(stored.annotation.instances, inst);

    // the small-level annotation is independent and keeps its own revision
    let small = ds.annotation("img0000", SuperpixelLevel::Small).unwrap().unwrap();
    assert_eq!(small.revision, 0);

    let (s, v) = call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(1, level, inst))).await;
    assert_eq!((s, v["revision"].as_u64()), (StatusCode::OK, Some(2)));
}

#[tokio::test]
async fn invalid_annotations_are_unprocessable() {
    let (_d, ds, cfg) = dataset(1);
    let app = app(&ds, &cfg, None);
    let level = SuperpixelLevel::Large;
    let bad_id = vec![Instance { id: 1, superpixels: vec![100_000] }];
    let (s, _) = call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(0, level, bad_id))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let shared = vec![Instance { id: 1, superpixels: vec![2] }, Instance { id: 2, superpixels: vec![2] }];
    let (s, _) = call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(0, level, shared))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let dot = AnnotationWrite {
        expected_revision: 0,
        annotation: AnnotationSet::dots("img0000", level, vec![PixelCoord::new(48, 3)]),
    };
    let (s, _) = call_json(&app, "PUT", "/images/img0000/annotation", Some(serde_json::to_value(dot).unwrap())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_json(&app, "PUT", "/images/img0000/annotation", Some(json!({ "annotation": 3 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(ds.annotation("img0000", level).unwrap().is_none());
}

#[tokio::test]
async fn export_reflects_writes_and_matches_offline_targets() {
    let (_d, ds, cfg) = dataset(1);
    let app = app(&ds, &cfg, None);
    let level = SuperpixelLevel::Medium;
    let inst = vec![
        Instance { id: 1, superpixels: vec![0, 1] },
        Instance { id: 4, superpixels: vec![7] },
        Instance { id: 9, superpixels: vec![10, 11, 12] },
    ];
    call_json(&app, "PUT", "/images/img0000/annotation", Some(region_write(0, level, inst.clone()))).await;
    let (s, v) = call_json(&app, "GET", "/export?level=medium", None).await;
    assert_eq!(s, StatusCode::OK);
    let entries: Vec<ExportEntry> = serde_json::from_value(v).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].count, 3.0);
    assert!((entries[0].sum - 3.0).abs() < 1e-6, "{}", entries[0].sum);

    let (s, bytes) = call(&app, "GET", "/export/img0000?level=medium", None).await;
    assert_eq!(s, StatusCode::OK);
    let served = formats::decode_pdm(&bytes).unwrap();
    let map = ds.superpixels("img0000", level, &cfg.slic).unwrap();
    let ann = AnnotationSet::regions("img0000", level, inst);
    let offline = build_region_density(&ann, &map, (48, 48), cfg.density.sigma_region).unwrap();
    assert_eq!(served, offline.grid.map(|v| v as f32 as f64), "PDM1 stores f32");

    let (_, all) = call_json(&app, "GET", "/export", None).await;
    assert_eq!(all.as_array().unwrap().len(), 2, "small synthetic annotation plus the medium write");
}
