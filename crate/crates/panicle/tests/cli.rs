use std::path::Path;
use std::process::{Command, Output};

use panicle::formats::{self, IsotonicRow, PredictionRow, PrRow};
use panicle_core::density::{AnnotationSet, Instance};
use panicle_core::slic::SuperpixelLevel;

fn panicle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panicle")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = panicle(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "\
seed = 5
[synth]
height = 32
width = 32
min_blobs = 1
max_blobs = 4
images_per_segment = 3
[net]
width_divisor = 25
[train_detect]
epochs = 1
lr = 0.05
batch_size = 4
[train_count]
epochs = 1
lr = 0.05
batch_size = 4
[segment]
alphas = [0.4]
betas = [1.0]
";

#[test]
fn usage_errors_exit_1() {
    assert_eq!(panicle(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(panicle(&["slic", "--image"]).status.code(), Some(1));
    assert_eq!(panicle(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2_and_name_the_path() {
    let out = panicle(&["slic", "--image", "/nonexistent/x.png", "--out", "/tmp/never.pdm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.png"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[density]\nsigma_dot = -1\n").unwrap();
    let out = panicle(&["--config", p(&bad), "synth", "--out", p(dir.path()), "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn density_region_target_sums_to_instance_count() {
    let dir = tempfile::tempdir().unwrap();
    let img = panicle::synth::generate(&panicle::synth::SynthConfig::default(), 1, 0, 1).remove(0);
    let img_path = dir.path().join("i.png");
    formats::write_png(&img_path, &img.image).unwrap();
    let sp = dir.path().join("sp.pdm");
    ok(&["slic", "--image", p(&img_path), "--level", "medium", "--out", p(&sp)]);
    let map = formats::read_superpixels(&sp).unwrap();
    assert_eq!(map.level(), Some(SuperpixelLevel::Medium));

    let ann = AnnotationSet::regions(
        "i",
        SuperpixelLevel::Medium,
        vec![Instance { id: 1, superpixels: vec![3, 4] }, Instance { id: 2, superpixels: vec![40] }],
    );
    let ann_path = dir.path().join("a.json");
    formats::write_json(&ann_path, &ann).unwrap();
    let out = dir.path().join("t.pdm");
    let stdout = ok(&["density", "--ann", p(&ann_path), "--image", p(&img_path), "--mode", "region", "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["count"], 2.0);
    let t = formats::read_pdm(&out).unwrap();
    assert!((t.total() - 2.0).abs() < 1e-4);

    // with the saved map instead of recomputing it
    let out2 = dir.path().join("t2.pdm");
    let args = ["density", "--ann", p(&ann_path), "--image", p(&img_path), "--mode", "region"];
    ok(&[&args[..], &["--superpixels", p(&sp), "--out", p(&out2)]].concat());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());

    let dots = AnnotationSet::dots("i", SuperpixelLevel::Small, vec![]);
    formats::write_json(&ann_path, &dots).unwrap();
    let out = panicle(&["density", "--ann", p(&ann_path), "--image", p(&img_path), "--mode", "region", "--out", p(&out2)]);
    assert_eq!(out.status.code(), Some(2), "region target from a dot annotation");
}

#[test]
fn gdd_table() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.csv");
    std::fs::write(&w, "date,tmin_f,tmax_f\n2020-06-01,60,80\n2020-06-02,40,70\n2020-06-03,70,100\n").unwrap();
    let out = ok(&["gdd", "--weather", p(&w), "--planting", "2020-06-01", "--date", "2020-06-01", "--date", "2020-06-03"]);
    assert_eq!(out, "date,gdd\n2020-06-01,0\n2020-06-03,40\n");
    let out = panicle(&["gdd", "--weather", p(&w), "--planting", "2020-06-01", "--date", "2020-06-09"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn isotonic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "segment_id,gdd,raw_count\nb,10,5\na,20,1\na,10,3\nb,20,7\n").unwrap();
    let out = dir.path().join("out.csv");
    ok(&["isotonic", "--input", p(&input), "--out", p(&out)]);
    let rows: Vec<IsotonicRow> = formats::read_csv(&out).unwrap();
    let got: Vec<(String, f64, Option<f64>)> = rows.into_iter().map(|r| (r.segment_id, r.gdd, r.isotonic_count)).collect();
    assert_eq!(
        got,
        vec![
            ("a".into(), 10.0, Some(2.0)),
            ("a".into(), 20.0, Some(2.0)),
            ("b".into(), 10.0, Some(5.0)),
            ("b".into(), 20.0, Some(7.0)),
        ]
    );
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("segment_id,gdd,raw_count,isotonic_count\n"));
}

#[test]
fn eval_count_summary() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("p.csv");
    let truth = dir.path().join("t.csv");
    std::fs::write(&pred, "image,segment_id,gdd,raw,tta,isotonic\nx,s,1,3,2,2\ny,s,2,5,6,6\n").unwrap();
    std::fs::write(&truth, "image,count\nx,2\ny,6\n").unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(&["eval-count", "--pred", p(&pred), "--truth", p(&truth)])).unwrap();
    assert_eq!(v["images"], 2);
    assert_eq!(v["mae_raw"], 1.0);
    assert_eq!(v["mae_tta"], 0.0);
    assert_eq!(v["r2_isotonic"], 1.0);
}

#[test]
fn synthetic_end_to_end_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = p(&cfg);

    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    ok(&["--config", c, "synth", "--out", p(&d1), "--count", "6"]);
    ok(&["--config", c, "synth", "--out", p(&d2), "--count", "6"]);
    for sub in ["images/img0003.png", "truth/img0003.pdm", "meta/img0003.json", "annotations/img0003/small.json"] {
        assert_eq!(std::fs::read(d1.join(sub)).unwrap(), std::fs::read(d2.join(sub)).unwrap(), "{sub}");
    }

    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let s1 = ok(&["--config", c, "run", "--data", p(&d1), "--test-group", "seg000", "--out", p(&r1)]);
    let s2 = ok(&["--config", c, "run", "--data", p(&d1), "--test-group", "seg000", "--out", p(&r2)]);
    assert_eq!(s1, s2);
    for f in ["detector.pcnn", "counter.pcnn", "predictions.csv", "pr_oracle.csv", "pr_network.csv"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let v: serde_json::Value = serde_json::from_str(&s1).unwrap();
    assert_eq!((v["train_images"].as_u64(), v["test_images"].as_u64()), (Some(3), Some(3)));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r1.join("train-count.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let preds: Vec<PredictionRow> = formats::read_csv(&r1.join("predictions.csv")).unwrap();
    assert_eq!(preds.len(), 3);
    assert!(preds.windows(2).all(|w| w[0].isotonic <= w[1].isotonic + 1e-12));
    let pr: Vec<PrRow> = formats::read_csv(&r1.join("pr_oracle.csv")).unwrap();
    assert_eq!(pr.len(), 1);

    // the individual stages reproduce the pipeline's artifacts
    let det = dir.path().join("det.pcnn");
    let cnt = dir.path().join("cnt.pcnn");
    let pred = dir.path().join("pred.csv");
    let data = ["--data", p(&d1), "--test-group", "seg000"];
    ok(&[&["--config", c, "train-detect"], &data[..], &["--out", p(&det)]].concat());
    assert_eq!(std::fs::read(&det).unwrap(), std::fs::read(r1.join("detector.pcnn")).unwrap());
    ok(&[&["--config", c, "train-count"], &data[..], &["--detector", p(&det), "--out", p(&cnt)]].concat());
    assert_eq!(std::fs::read(&cnt).unwrap(), std::fs::read(r1.join("counter.pcnn")).unwrap());
    ok(&[&["--config", c, "predict"], &data[..], &["--model", p(&cnt), "--detector", p(&det), "--out", p(&pred)]].concat());
    assert_eq!(std::fs::read(&pred).unwrap(), std::fs::read(r1.join("predictions.csv")).unwrap());

    let seg = dir.path().join("seg.json");
    let image = d1.join("images/img0000.png");
    let args = ["--config", c, "segment", "--image", p(&image), "--detector", p(&det), "--counter", p(&cnt)];
    ok(&[&args[..], &["--gdd", "1100", "--out", p(&seg)]].concat());
    let seg: formats::SegmentationFile = formats::read_json(&seg).unwrap();
    assert_eq!(seg.image, "img0000");

    let pr_path = dir.path().join("pr.csv");
    let v: serde_json::Value =
        serde_json::from_str(&ok(&[&["--config", c, "eval-seg"], &data[..], &["--oracle", "--out", p(&pr_path)]].concat()))
            .unwrap();
    assert_eq!(std::fs::read(&pr_path).unwrap(), std::fs::read(r1.join("pr_oracle.csv")).unwrap());
    assert!(v["map"].as_f64().unwrap() >= 0.0);
}

#[test]
fn training_without_annotations_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    let out = panicle(&["train-detect", "--data", p(dir.path()), "--out", p(&dir.path().join("d.pcnn"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-detect"));
}
