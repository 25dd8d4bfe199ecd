//! `panicle` command-line interface.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use panicle_core::convnet::ModelState;
use panicle_core::density::{build_dot_density, build_region_density, AnnotationMode, DensityTarget};
use panicle_core::eval::pr_curve_and_map;
use panicle_core::instseg::{detect_superpixels, segment_instances};
use panicle_core::isotonic::CountSeries;
use panicle_core::slic::{slic_segment, SuperpixelLevel};
use panicle_core::thermal::compute_gdd;
use serde::Serialize;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result, StageContext};
use crate::formats::{self, IsotonicRow, PrRow, PredictionRow, SegmentationFile, TruthRow};
use crate::pipeline::{self, MapSource, Manifest, Sample};
use crate::synth;

const PREDICTION_HEADER: &[&str] = &["image", "segment_id", "gdd", "raw", "tta", "isotonic"];
const ISOTONIC_HEADER: &[&str] = &["segment_id", "gdd", "raw_count", "isotonic_count"];
const COUNT_METRIC_HEADER: &[&str] = &["segment_id", "truth", "raw", "tta", "isotonic"];
const PR_HEADER: &[&str] = &["alpha", "beta", "tp", "fp", "fn", "precision", "recall"];

#[derive(Debug, Parser)]
#[command(name = "panicle", version, about = "Panicle counting and segmentation pipeline")]
pub struct Cli {
    /// TOML configuration; defaults apply to everything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DensityMode {
    Dot,
    Region,
    Detection,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a regression target from an annotation.
    Density {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        mode: DensityMode,
        /// Superpixel map (PDM1 with sidecar) the annotation refers to;
        /// computed from the image when omitted.
        #[arg(long)]
        superpixels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a superpixel map.
    Slic {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "small", value_parser = parse_level)]
        level: SuperpixelLevel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Growing degree days since planting for each image date.
    Gdd {
        #[arg(long)]
        weather: PathBuf,
        #[arg(long)]
        planting: NaiveDate,
        #[arg(long = "date", required = true)]
        dates: Vec<NaiveDate>,
    },
    /// Train the detection network.
    TrainDetect {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the count network.
    TrainCount {
        #[command(flatten)]
        data: DataArgs,
        /// Detection checkpoint feeding the extra input channel.
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw, augmented and isotonic counts for every test image.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monotone correction of `segment_id,gdd,raw_count` series.
    Isotonic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image into panicle instances.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        counter: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        gdd: f64,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAE and R² of predicted counts.
    EvalCount {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-image metric rows.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision-recall sweep and mAP of instance segmentation.
    EvalSeg {
        #[command(flatten)]
        data: DataArgs,
        /// Use maps built from the annotations instead of networks.
        #[arg(long, conflicts_with_all = ["detector", "counter"])]
        oracle: bool,
        #[arg(long, required_unless_present = "oracle")]
        detector: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        counter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Every stage from training to evaluation.
    Run {
        #[command(flatten)]
        data: DataArgs,
        /// Generate this many synthetic images into the data directory first.
        #[arg(long)]
        synth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data_dir: PathBuf,
        /// Detection checkpoint used for guesses.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Train on everything except these groups; overrides `split.test_groups`.
    #[arg(long = "test-group")]
    pub test_groups: Vec<String>,
}

fn parse_level(s: &str) -> std::result::Result<SuperpixelLevel, String> {
    SuperpixelLevel::parse(s).ok_or_else(|| format!("unknown level {s:?} (small, medium, large)"))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn context(cfg_path: Option<&Path>, data: Option<&DataArgs>) -> Result<Config> {
    let mut cfg = Config::load_or_default(cfg_path)?;
    if let Some(d) = data {
        if !d.test_groups.is_empty() {
            cfg.split.test_groups = d.test_groups.clone();
        }
    }
    Ok(cfg)
}

fn progress(stage: &'static str) -> impl FnMut(usize, f64) {
    move |epoch, loss| eprintln!("{stage}: epoch {} loss {loss:.6}", epoch + 1)
}

fn load(data: &DataArgs, cfg: &Config) -> Result<(Dataset, Vec<Sample>)> {
    let ds = Dataset::open(&data.data)?;
    let samples = pipeline::load_samples(&ds, cfg).stage("load")?;
    Ok((ds, samples))
}

fn out_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::Density { ann, image, mode, superpixels, out } => {
            let cfg = context(cfg_path, None)?;
            let ann = formats::read_annotation(&ann)?;
            let img = formats::read_png(&image)?;
            let shape = (img.height(), img.width());
            let spmap = || match &superpixels {
                Some(p) => formats::read_superpixels(p),
                None => Ok(slic_segment(&img, &cfg.slic.params(ann.level))?),
            };
            let target: DensityTarget = match mode {
                DensityMode::Dot => build_dot_density(&ann, shape, cfg.density.sigma_dot)?,
                DensityMode::Region => build_region_density(&ann, &spmap()?, shape, cfg.density.sigma_region)?,
                DensityMode::Detection => {
                    if ann.mode != AnnotationMode::Region {
                        return Err(Error::Usage("detection targets need a region annotation".into()));
                    }
                    panicle_core::density::build_detection_target(&ann, &spmap()?, shape, cfg.density.sigma_det)?
                }
            };
            formats::write_pdm(&out, &target.grid)?;
            print_json(&serde_json::json!({ "count": target.count, "sum": target.grid.total() }));
        }
        Command::Slic { image, level, out } => {
            let cfg = context(cfg_path, None)?;
            let map = slic_segment(&formats::read_png(&image)?, &cfg.slic.params(level))?;
            formats::write_superpixels(&out, &map)?;
            print_json(&serde_json::json!({ "superpixels": map.len(), "mean_area": map.mean_area() }));
        }
        Command::Gdd { weather, planting, dates } => {
            let series = formats::read_weather(&weather)?;
            println!("date,gdd");
            for d in dates {
                println!("{d},{}", compute_gdd(&series, planting, d)?.gdd());
            }
        }
        Command::TrainDetect { data, out } => {
            let cfg = context(cfg_path, Some(&data))?;
            let (_, samples) = load(&data, &cfg)?;
            let (train, _) = pipeline::split(&samples, &cfg);
            let (model, _) = pipeline::train_detector(&cfg, &train, progress("train-detect")).stage("train-detect")?;
            formats::write_checkpoint(&out, &model)?;
            Manifest::new("train-detect", &cfg).input(&data.data).output(&out).write(out_dir(&out))?;
        }
        Command::TrainCount { data, detector, out } => {
            let cfg = context(cfg_path, Some(&data))?;
            let (_, samples) = load(&data, &cfg)?;
            let (train, _) = pipeline::split(&samples, &cfg);
            let det = detector.as_deref().map(formats::read_checkpoint).transpose()?;
            let (model, _) =
                pipeline::train_counter(&cfg, &train, det.as_ref(), progress("train-count")).stage("train-count")?;
            formats::write_checkpoint(&out, &model)?;
            let mut m = Manifest::new("train-count", &cfg).input(&data.data);
            if let Some(d) = &detector {
                m = m.input(d);
            }
            m.output(&out).write(out_dir(&out))?;
        }
        Command::Predict { data, model, detector, out } => {
            let cfg = context(cfg_path, Some(&data))?;
            let (_, samples) = load(&data, &cfg)?;
            let (_, test) = pipeline::split(&samples, &cfg);
            let counter = formats::read_checkpoint(&model)?;
            let det = detector.as_deref().map(formats::read_checkpoint).transpose()?;
            let cfg = align_detection_channel(cfg, &counter)?;
            let rows = pipeline::predict_counts(&cfg, &counter, det.as_ref(), &test).stage("predict")?;
            formats::write_csv(&out, &rows, PREDICTION_HEADER)?;
            Manifest::new("predict", &cfg).input(&data.data).input(&model).output(&out).write(out_dir(&out))?;
        }
        Command::Isotonic { input, out } => {
            let rows: Vec<IsotonicRow> = formats::read_csv(&input)?;
            formats::write_csv(&out, &isotonic_rows(rows)?, ISOTONIC_HEADER)?;
        }
        Command::Segment { image, detector, counter, gdd, alpha, beta, out } => {
            let cfg = context(cfg_path, None)?;
            let img = formats::read_png(&image)?;
            let det_model = formats::read_checkpoint(&detector)?;
            let count_model = formats::read_checkpoint(&counter)?;
            let cfg = align_detection_channel(cfg, &count_model)?;
            let det = pipeline::predict_detection(&det_model, &cfg, &img, gdd)?;
            let region = pipeline::predict_region(&cfg, &count_model, Some(&det_model), Some(&det), &img, gdd)?;
            let spmap = slic_segment(&img, &cfg.slic.params(cfg.slic.level))?;
            let (alpha, beta) = (alpha.unwrap_or(cfg.segment.alpha), beta.unwrap_or(cfg.segment.beta));
            let panicles = detect_superpixels(&det, &spmap, alpha)?;
            let clusters = segment_instances(&panicles, &img, &spmap, &region, &cfg.segment.fitness().with_beta(beta))?;
            let id = image.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            formats::write_json(&out, &SegmentationFile::new(id, alpha, beta, &clusters))?;
            print_json(&serde_json::json!({ "instances": clusters.n_clusters() }));
        }
        Command::EvalCount { pred, truth, out } => {
            let preds: Vec<PredictionRow> = formats::read_csv(&pred)?;
            let truth: BTreeMap<String, f64> =
                formats::read_csv::<TruthRow>(&truth)?.into_iter().map(|t| (t.image, t.count)).collect();
            let (summary, rows) = pipeline::count_metrics(&preds, &truth)?;
            if let Some(out) = out {
                formats::write_csv(&out, &rows, COUNT_METRIC_HEADER)?;
            }
            print_json(&summary);
        }
        Command::EvalSeg { data, oracle, detector, counter, out } => {
            let cfg = context(cfg_path, Some(&data))?;
            let (ds, samples) = load(&data, &cfg)?;
            let (_, test) = pipeline::split(&samples, &cfg);
            let models = if oracle {
                None
            } else {
                let d = formats::read_checkpoint(detector.as_deref().expect("required by clap"))?;
                let c = formats::read_checkpoint(counter.as_deref().expect("required by clap"))?;
                Some((d, c))
            };
            let cfg = match &models {
                Some((_, c)) => align_detection_channel(cfg, c)?,
                None => cfg,
            };
            let source = match &models {
                Some((d, c)) => MapSource::Models { detector: d, counter: c },
                None => MapSource::Oracle,
            };
            let map = eval_segmentation(&ds, &cfg, &test, &source, &out)?;
            print_json(&serde_json::json!({ "map": map }));
        }
        Command::Synth { out, count, start, seed } => {
            let cfg = context(cfg_path, None)?;
            let seed = seed.unwrap_or(cfg.seed);
            write_synthetic(&Dataset::create(&out)?, &cfg, seed, start, count)?;
            let mut m = Manifest::new("synth", &cfg);
            m.seed = seed;
            m.output(&out).write(&out)?;
        }
        Command::Run { data, synth, out } => {
            let cfg = context(cfg_path, Some(&data))?;
            if let Some(n) = synth {
                write_synthetic(&Dataset::create(&data.data)?, &cfg, cfg.seed, 0, n).stage("synth")?;
            }
            let summary = run_pipeline(&cfg, &data.data, &out)?;
            print_json(&summary);
        }
        Command::Serve { port, data_dir, model } => {
            let cfg = context(cfg_path, None)?;
            let ds = Dataset::open(&data_dir)?;
            let model = model.as_deref().map(formats::read_checkpoint).transpose()?;
            crate::service::serve(port, ds, cfg, model)?;
        }
    }
    Ok(())
}

/// A checkpoint fixes whether the detection channel is present.
fn align_detection_channel(mut cfg: Config, counter: &ModelState) -> Result<Config> {
    let c = counter.config.input_channels;
    if c == cfg.detect_channels() + 1 {
        cfg.count.detection_channel = true;
    } else if c == cfg.detect_channels() {
        cfg.count.detection_channel = false;
    } else {
        return Err(Error::Usage(format!(
            "count checkpoint takes {c} input channels, configuration implies {}",
            cfg.count_channels()
        )));
    }
    Ok(cfg)
}

pub fn isotonic_rows(rows: Vec<IsotonicRow>) -> Result<Vec<IsotonicRow>> {
    let mut by_segment: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by_segment.entry(r.segment_id.clone()).or_default().push((r.gdd, r.raw_count));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (seg, obs) in by_segment {
        let series = CountSeries::fit(seg.clone(), obs)?;
        out.extend(series.entries().iter().map(|e| IsotonicRow {
            segment_id: seg.clone(),
            gdd: e.gdd,
            raw_count: e.raw,
            isotonic_count: Some(e.corrected),
        }));
    }
    Ok(out)
}

pub fn write_synthetic(ds: &Dataset, cfg: &Config, seed: u64, start: usize, count: usize) -> Result<()> {
    for s in synth::generate(&cfg.synth, seed, start, count) {
        ds.write_synthetic(&s, cfg.slic.level, &cfg.slic)?;
    }
    Ok(())
}

/// Writes the PR sweep to `out` and returns the mAP.
pub fn eval_segmentation(
    ds: &Dataset,
    cfg: &Config,
    samples: &[&Sample],
    source: &MapSource<'_>,
    out: &Path,
) -> Result<f64> {
    let cases = pipeline::segmentation_cases(ds, cfg, samples, source).stage("eval-seg")?;
    let s = &cfg.segment;
    let (points, map) =
        pr_curve_and_map(&cases, &s.alphas, &s.betas, s.iou_threshold, &s.fitness()).stage("eval-seg")?;
    let rows: Vec<PrRow> = points.iter().map(PrRow::from).collect();
    formats::write_csv(out, &rows, PR_HEADER)?;
    Ok(map)
}

/// Headline numbers of a full run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub train_images: usize,
    pub test_images: usize,
    pub counts: pipeline::CountSummary,
    pub map_oracle: f64,
    pub map_network: f64,
}

/// Trains both networks, predicts counts, and evaluates counting and
/// segmentation, writing every artifact and its manifest into `out`.
pub fn run_pipeline(cfg: &Config, data: &Path, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ds = Dataset::open(data)?;
    let samples = pipeline::load_samples(&ds, cfg).stage("load")?;
    let (train, test) = pipeline::split(&samples, cfg);
    let manifest = |stage: &str| Manifest::new(stage, cfg).input(data);

    let (detector, _) = pipeline::train_detector(cfg, &train, progress("train-detect")).stage("train-detect")?;
    let det_path = out.join("detector.pcnn");
    formats::write_checkpoint(&det_path, &detector)?;
    manifest("train-detect").output(&det_path).write(out)?;

    let (counter, _) =
        pipeline::train_counter(cfg, &train, Some(&detector), progress("train-count")).stage("train-count")?;
    let count_path = out.join("counter.pcnn");
    formats::write_checkpoint(&count_path, &counter)?;
    manifest("train-count").input(&det_path).output(&count_path).write(out)?;

    let rows = pipeline::predict_counts(cfg, &counter, Some(&detector), &test).stage("predict")?;
    let pred_path = out.join("predictions.csv");
    formats::write_csv(&pred_path, &rows, PREDICTION_HEADER)?;
    manifest("predict").input(&count_path).output(&pred_path).write(out)?;

    let truth: BTreeMap<String, f64> =
        test.iter().filter_map(|s| s.count().map(|c| (s.meta.id.clone(), c))).collect();
    let (counts, metric_rows) = pipeline::count_metrics(&rows, &truth).stage("eval-count")?;
    let metrics_path = out.join("count_metrics.csv");
    formats::write_csv(&metrics_path, &metric_rows, COUNT_METRIC_HEADER)?;
    manifest("eval-count").input(&pred_path).output(&metrics_path).write(out)?;

    let oracle_path = out.join("pr_oracle.csv");
    let map_oracle = eval_segmentation(&ds, cfg, &test, &MapSource::Oracle, &oracle_path)?;
    let net_path = out.join("pr_network.csv");
    let source = MapSource::Models { detector: &detector, counter: &counter };
    let map_network = eval_segmentation(&ds, cfg, &test, &source, &net_path)?;
    manifest("eval-seg").input(&count_path).output(&oracle_path).output(&net_path).write(out)?;

    let summary =
        RunSummary { train_images: train.len(), test_images: test.len(), counts, map_oracle, map_network };
    formats::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
