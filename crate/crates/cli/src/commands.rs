use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gmn_core::counting::{count_map, infer_similarity, CountMode, DetectionSet, Exemplar};
use gmn_core::crowd::{
    count_image_by_patches, load_indexed_patches, quantize_patches, read_patch_index, synthetic_crowd, train_patch_matcher,
    write_patch_index, ClassExemplars, MatcherConfig, PatchClassSpec, PatchMatcher,
};
use gmn_core::data::annotations::{box_jsonl_string, dot_csv_string, parse_box_jsonl, parse_dot_csv};
use gmn_core::data::{generate_synthetic_scene, BBox, BoxRecord, Image, ShapeFamily, SyntheticSceneSpec};
use gmn_core::evaluation::{choose_threshold, compute_metrics, image_record, radius_from_boxes, sweep_csv, SweepRow};
use gmn_core::model::{Gmn, ModelConfig, WidthMultiplier};
use gmn_core::training::{adapt, pretrain, Manifest, TrainConfig, TrainOptions};
use gmn_core::model::TrainMode;
use serde::{Deserialize, Serialize};

fn parse_box(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("box `{s}` must be x,y,w,h"))?;
    if v.len() != 4 {
        bail!("box `{s}` must have four components x,y,w,h");
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

fn width(w: &Option<String>) -> Result<WidthMultiplier> {
    Ok(match w {
        Some(s) => s.parse()?,
        None => WidthMultiplier::EIGHTH,
    })
}

fn require<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().with_context(|| format!("--{name} is required"))
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Repeated-object scenes with dot and box annotations.
    #[default]
    Scenes,
    /// Dot-texture crowds for the patch-classification pipeline.
    Crowd,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<SynthKind>,
    /// Number of images.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Canvas side in pixels (scenes) or tiles per side (crowd).
    #[arg(long)]
    pub canvas: Option<usize>,
    #[arg(long)]
    pub count_min: Option<usize>,
    #[arg(long)]
    pub count_max: Option<usize>,
    /// Shape family; cycles through all families when absent.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let out = require(&a.out, "out")?;
    fs::create_dir_all(&out)?;
    let n = a.scenes.unwrap_or(10);
    let seed = a.seed.unwrap_or(0);
    match a.kind.unwrap_or_default() {
        SynthKind::Crowd => {
            let spec = PatchClassSpec::default();
            let tiles = a.canvas.unwrap_or(4);
            for i in 0..n {
                let (img, dots) = synthetic_crowd(tiles, tiles, &spec, seed.wrapping_add(i as u64));
                img.save_png(out.join(format!("crowd_{i:04}.png")))?;
                let set = gmn_core::data::DotAnnotationSet::new(dots);
                fs::write(out.join(format!("crowd_{i:04}.csv")), dot_csv_string(&set))?;
            }
        }
        SynthKind::Scenes => {
            let family: Option<ShapeFamily> = a
                .family
                .as_deref()
                .map(|f| serde_json::from_value(serde_json::Value::String(f.into())))
                .transpose()
                .context("unknown shape family")?;
            let (lo, hi) = (a.count_min.unwrap_or(5), a.count_max.unwrap_or(15));
            if lo > hi {
                bail!("count-min exceeds count-max");
            }
            let mut records = Vec::new();
            let mut track = 0;
            for i in 0..n {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let spec = SyntheticSceneSpec {
                    width: a.canvas.unwrap_or(192),
                    height: a.canvas.unwrap_or(192),
                    count: lo + (s as usize % (hi - lo + 1)),
                    family: family.unwrap_or(ShapeFamily::ALL[i % ShapeFamily::ALL.len()]),
                    distractors: a.distractors.unwrap_or(4),
                    seed: s,
                    ..Default::default()
                };
                let scene = generate_synthetic_scene(&spec)?;
                let name = format!("scene_{i:04}.png");
                scene.image.save_png(out.join(&name))?;
                fs::write(out.join(format!("scene_{i:04}.csv")), dot_csv_string(&scene.dots))?;
                for o in &scene.objects {
                    track += 1;
                    records.push(BoxRecord {
                        image: name.clone(),
                        x: o.bbox.x,
                        y: o.bbox.y,
                        w: o.bbox.w,
                        h: o.bbox.h,
                        track_id: track,
                        class_id: o.class_id,
                        frame: 0,
                    });
                }
            }
            fs::write(out.join("boxes.jsonl"), box_jsonl_string(&records)?)?;
        }
    }
    log::info!("wrote {n} images to {}", out.display());
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainArgs {
    /// Box JSONL manifest; image paths resolve against its directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Starting checkpoint (adapt only).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub search_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Width multiplier such as `1/8` or `0.25` (pretrain only).
    #[arg(long)]
    pub width: Option<String>,
    /// JSONL training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_box_jsonl(&text, path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    Ok(Manifest::from_records(&records, root)?)
}

fn train_config(a: &TrainArgs, mode: TrainMode) -> Result<TrainConfig> {
    let mut cfg = TrainConfig {
        mode,
        ..Default::default()
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.search_size {
        cfg.pairs.search_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.grad_clip = a.grad_clip.or(cfg.grad_clip);
    cfg.seed = a.seed.unwrap_or(0);
    cfg.model = ModelConfig::with_width(width(&a.width)?);
    Ok(cfg)
}

pub fn train(a: &TrainArgs, mode: TrainMode) -> Result<()> {
    let manifest = load_manifest(&require(&a.manifest, "manifest")?)?;
    let cfg = train_config(a, mode)?;
    let mut log_file = a.log.as_ref().map(fs::File::create).transpose()?;
    let opts = TrainOptions {
        checkpoint_dir: Some(require(&a.out, "out")?),
        log: log_file.as_mut().map(|f| f as &mut dyn Write),
    };
    let report = match mode {
        TrainMode::Pretrain => pretrain(&cfg, &manifest, opts)?.1,
        TrainMode::Adapt => {
            let start = Gmn::load(require(&a.checkpoint, "checkpoint")?)?.model;
            adapt(start, &manifest, &cfg, opts)?.1
        }
    };
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{}",
        serde_json::json!({ "steps": report.losses.len(), "final_loss": last, "checkpoints": report.checkpoints })
    );
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CountArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Exemplar box as `x,y,w,h` in image pixels.
    #[arg(long)]
    pub exemplar_box: Option<String>,
    /// `localmax` or `integral`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Suppression radius in pixels; defaults to the exemplar radius.
    #[arg(long)]
    pub min_distance: Option<f64>,
    /// Detections JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Similarity map in GMND format (with a JSON sidecar).
    #[arg(long)]
    pub map_out: Option<PathBuf>,
    /// 8-bit heatmap PNG of the similarity map.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Output of `gmn count`, also the input of `gmn eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub image: String,
    pub checkpoint: String,
    pub exemplar_box: BBox,
    pub mode: CountMode,
    pub count: f64,
    pub threshold: f64,
    pub min_distance: f64,
    pub detections: Vec<gmn_core::counting::Detection>,
}

pub fn count(a: &CountArgs) -> Result<()> {
    let ckpt = require(&a.checkpoint, "checkpoint")?;
    let model = Gmn::load(&ckpt)?.model;
    let image_path = require(&a.image, "image")?;
    let image = Image::open(&image_path)?;
    let bbox = parse_box(&require(&a.exemplar_box, "exemplar-box")?)?;
    let mode: CountMode = a.mode.as_deref().unwrap_or("localmax").parse()?;
    let threshold = a.threshold.unwrap_or(gmn_core::service::DEFAULT_THRESHOLD);
    let exemplar = Exemplar::from_box(&image, &bbox)?;
    let min_distance = a.min_distance.unwrap_or_else(|| exemplar.radius());
    let map = infer_similarity(&model, &image, &exemplar)?;
    let result = count_map(&map, mode, threshold, min_distance);
    if let Some(p) = &a.map_out {
        map.save(p)?;
    }
    if let Some(p) = &a.heatmap {
        fs::write(p, map.heatmap_png()?)?;
    }
    // detections are always reported so integral runs can still be inspected
    let detections = match result.detections {
        Some(d) => d,
        None => gmn_core::counting::detect_local_maxima(&map, threshold, min_distance),
    };
    let file = DetectionsFile {
        image: image_path.display().to_string(),
        checkpoint: ckpt.display().to_string(),
        exemplar_box: bbox,
        mode,
        count: result.count,
        threshold,
        min_distance,
        detections: detections.detections,
    };
    write_json(a.out.as_deref(), &file)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct EvalArgs {
    /// Detections JSON files from `gmn count`, one per image.
    #[arg(long, num_args = 1..)]
    pub detections: Vec<PathBuf>,
    /// Dot CSV ground truth, in the same order as `--detections`.
    #[arg(long, num_args = 1..)]
    pub annotations: Vec<PathBuf>,
    /// Match tolerance R in pixels.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Box JSONL used to derive R as the mean box radius when `--tolerance` is absent.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Thresholds to sweep; the best by F1 is reported.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threshold sweep CSV.
    #[arg(long)]
    pub sweep_out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.detections.is_empty() || a.detections.len() != a.annotations.len() {
        bail!("give one --annotations file per --detections file");
    }
    let tolerance = match (a.tolerance, &a.boxes) {
        (Some(r), _) => r,
        (None, Some(p)) => {
            let recs = parse_box_jsonl(&fs::read_to_string(p)?, p)?;
            radius_from_boxes(&recs.iter().map(BoxRecord::bbox).collect::<Vec<_>>()).context("box file is empty")?
        }
        (None, None) => bail!("--tolerance or --boxes is required"),
    };
    let mut items = Vec::new();
    for (d, g) in a.detections.iter().zip(&a.annotations) {
        let det: DetectionsFile = serde_json::from_str(&fs::read_to_string(d)?).with_context(|| format!("reading {}", d.display()))?;
        let gts = parse_dot_csv(&fs::read_to_string(g)?, g)?;
        items.push((d.display().to_string(), det, gts.points));
    }
    let evaluate = |t: Option<f64>| {
        let records = items
            .iter()
            .map(|(id, det, gts)| {
                let set = DetectionSet {
                    detections: det.detections.clone(),
                    threshold: det.threshold,
                    min_distance: det.min_distance,
                };
                let (points, count) = match t {
                    Some(t) => {
                        let kept = set.above(t);
                        (kept.points(), kept.len() as f64)
                    }
                    None => (set.points(), det.count),
                };
                image_record(id.clone(), &points, gts, count, tolerance)
            })
            .collect();
        compute_metrics(records, tolerance, t, 1)
    };
    let report = if a.thresholds.is_empty() {
        evaluate(None)?
    } else {
        let floor = items.iter().map(|i| i.1.threshold).fold(f64::MIN, f64::max);
        if let Some(t) = a.thresholds.iter().find(|t| **t < floor) {
            bail!("threshold {t} is below the detection threshold {floor}; rerun `count` with a lower --threshold");
        }
        let rows: Vec<SweepRow> = a
            .thresholds
            .iter()
            .map(|&t| {
                let r = evaluate(Some(t))?;
                Ok(SweepRow { threshold: t, precision: r.precision, recall: r.recall, f1: r.f1, mae: r.mae })
            })
            .collect::<Result<_>>()?;
        if let Some(p) = &a.sweep_out {
            fs::write(p, sweep_csv(&rows))?;
        }
        evaluate(Some(choose_threshold(&rows)?.threshold))?
    };
    write_json(a.out.as_deref(), &report)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CrowdQuantizeArgs {
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Dot CSV per image, same order.
    #[arg(long, num_args = 1..)]
    pub dots: Vec<PathBuf>,
    /// Index JSONL to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn patch_spec(bin_width: Option<usize>) -> PatchClassSpec {
    PatchClassSpec {
        bin_width: bin_width.unwrap_or(5),
        ..Default::default()
    }
}

pub fn crowd_quantize(a: &CrowdQuantizeArgs) -> Result<()> {
    if a.images.is_empty() || a.images.len() != a.dots.len() {
        bail!("give one --dots file per --images file");
    }
    let spec = patch_spec(a.bin_width);
    spec.validate()?;
    let mut entries = Vec::new();
    for (img, dots) in a.images.iter().zip(&a.dots) {
        let image = Image::open(img)?;
        let points = parse_dot_csv(&fs::read_to_string(dots)?, dots)?;
        let source = fs::canonicalize(img)?.display().to_string();
        entries.extend(quantize_patches(&image, &points.points, &spec).iter().map(|p| p.index_entry(&source)));
    }
    let out = require(&a.out, "out")?;
    write_patch_index(&entries, &out)?;
    println!("{}", serde_json::json!({ "patches": entries.len(), "index": out }));
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CrowdTrainArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<String>,
    #[arg(long)]
    pub bin_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn crowd_train(a: &CrowdTrainArgs) -> Result<()> {
    let spec = patch_spec(a.bin_width);
    let patches = load_indexed_patches(&read_patch_index(require(&a.index, "index")?)?, Path::new(""), &spec)?;
    let d = MatcherConfig::default();
    let cfg = MatcherConfig {
        steps: a.steps.unwrap_or(d.steps),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(0),
        model: ModelConfig::with_width(width(&a.width)?),
        ..d
    };
    let (matcher, losses) = train_patch_matcher(&patches, &spec, &cfg)?;
    let out = require(&a.out, "out")?;
    matcher.save(&out, cfg.steps)?;
    println!("{}", serde_json::json!({ "steps": losses.len(), "final_loss": losses.last(), "checkpoint": out }));
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct CrowdCountArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training index; the tiles nearest each bin middle serve as exemplars.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Exemplar tiles averaged per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn crowd_count(a: &CrowdCountArgs) -> Result<()> {
    let matcher = PatchMatcher::load(require(&a.checkpoint, "checkpoint")?)?;
    let patches = load_indexed_patches(&read_patch_index(require(&a.index, "index")?)?, Path::new(""), &matcher.spec)?;
    let exemplars = ClassExemplars::from_patches(&patches, &matcher.spec, a.per_class.unwrap_or(1))?;
    let image = Image::open(require(&a.image, "image")?)?;
    let result = count_image_by_patches(&matcher, &image, &exemplars)?;
    write_json(a.out.as_deref(), &result)
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Listen address.
    #[arg(long)]
    pub addr: Option<String>,
    #[arg(long)]
    pub cache_mb: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let ckpt = require(&a.checkpoint, "checkpoint")?;
    let model = Gmn::load(&ckpt)?.model;
    let d = gmn_core::service::ServiceConfig::default();
    let cfg = gmn_core::service::ServiceConfig {
        cache_bytes: a.cache_mb.map(|m| m << 20).unwrap_or(d.cache_bytes),
        workers: a.workers.unwrap_or(d.workers).max(1),
    };
    let id = gmn_core::service::content_id(&fs::read(&ckpt)?);
    let addr = a.addr.clone().unwrap_or_else(|| "127.0.0.1:8080".into());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(model, id, cfg, &addr))
}
