//! `cvt-assd` command line: train, eval, infer, inspect.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::anchors::{generate_anchors, AnchorConfig};
use crate::checkpoint;
use crate::config::{parse_kv, KvMap, ModelConfig};
use crate::data::{self, image, open_dataset, parse_synth_spec, stack_images, Sample, SHAPE_NAMES, VOC_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{coco_ap, voc_ap, ImageGts, Interpolation};
use crate::inference::{detect, format_dump, DetectConfig, Detection};
use crate::inspect::inspect;
use crate::model::CvtAssd;
use crate::train::{train_loop, TrainConfig, TrainOutput};

pub const THREADS_ENV: &str = "CVT_ASSD_THREADS";

#[derive(Parser, Debug)]
#[command(name = "cvt-assd", version, about = "Convolutional vision transformer single-shot detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `train.log` plus checkpoints.
    Train(TrainArgs),
    /// Detect over a dataset and report average precision.
    Eval(EvalArgs),
    /// Detect on one PPM image and write an annotated copy.
    Infer(InferArgs),
    /// Print the per-layer shape, parameter and MAC table.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Config file (`key = value`), or the preset name `paper` / `tiny`.
    #[arg(long, short)]
    config: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory or `synth:<n>:<classes>:<seed>`.
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    /// COCO protocol (IoU 0.50:0.95 and size buckets) instead of VOC.
    #[arg(long)]
    coco: bool,
    /// VOC2007 11-point interpolation.
    #[arg(long)]
    eleven_point: bool,
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary PPM (P6) image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "runs/infer")]
    out: PathBuf,
    /// Minimum score of boxes drawn on the annotated image.
    #[arg(long, default_value_t = 0.5)]
    draw_threshold: f32,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Override the input resolution.
    #[arg(long)]
    input_size: Option<usize>,
}

/// Exit code for an error: 1 for usage/configuration problems, 2 for data problems.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // a global pool may already exist when embedded in a larger process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads the key map of a config file, or an empty map plus preset for `paper`/`tiny`.
fn load_config_map(arg: &str) -> Result<KvMap> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_kv(&text, arg);
    }
    match arg {
        "paper" | "tiny" => Ok(KvMap::from([("preset".to_string(), arg.to_string())])),
        _ => Err(Error::Usage(format!("config file `{arg}` does not exist"))),
    }
}

fn model_config(map: &KvMap) -> Result<ModelConfig> {
    ModelConfig::from_map(map)
}

fn class_names(data_spec: &str, num_classes: usize) -> Vec<String> {
    if parse_synth_spec(data_spec).is_some() {
        return SHAPE_NAMES.iter().take(num_classes).map(|s| s.to_string()).collect();
    }
    if num_classes == VOC_CLASSES.len() {
        return VOC_CLASSES.iter().map(|s| s.to_string()).collect();
    }
    (0..num_classes).map(|i| format!("class{i}")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let map = load_config_map(&a.config.config)?;
    let cfg = model_config(&map)?;
    let mut tc = TrainConfig::from_map(&map)?;
    if let Some(v) = a.iters {
        tc.total_iters = v;
    }
    if let Some(v) = a.lr {
        tc.initial_lr = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        tc.checkpoint_every = v;
    }
    if a.no_augment {
        tc.augment = false;
    }
    tc.validate()?;
    let dataset = open_dataset(&a.data, cfg.input_size)?;
    let model = CvtAssd::new(&cfg, tc.seed)?;
    if let Some(init) = &a.init {
        require_file(init, "checkpoint")?;
        checkpoint::load(&model, init)?;
    }
    create_dir(&a.out)?;
    let log = train_loop(&model, &dataset, &tc, Some(TrainOutput { dir: &a.out }))?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!("trained {} iterations: loss {:.4} -> {:.4}", log.records.len(), first.loss, last.loss);
    }
    for c in &log.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

/// Detections for every sample, in dataset order, batched.
pub fn detect_dataset(model: &CvtAssd, samples: &[Sample], cfg: &DetectConfig, batch: usize) -> Result<Vec<Vec<Detection>>> {
    let anchors = generate_anchors(&AnchorConfig::from_model(&model.cfg)?)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(detect(model, &stack_images(&refs)?, &anchors, cfg)?);
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let map = load_config_map(&a.config.config)?;
    let cfg = model_config(&map)?;
    require_file(&a.checkpoint, "checkpoint")?;
    if !(a.iou > 0.0 && a.iou < 1.0) {
        return Err(Error::Usage(format!("--iou must lie in (0, 1), got {}", a.iou)));
    }
    let dataset = open_dataset(&a.data, cfg.input_size)?;
    let model = CvtAssd::new(&cfg, 0)?;
    checkpoint::load(&model, &a.checkpoint)?;
    let dets = detect_dataset(&model, &dataset, &DetectConfig::default(), 8)?;
    create_dir(&a.out)?;
    let dump: String = dataset.iter().zip(&dets).map(|(s, d)| format_dump(&s.id, d)).collect();
    write(&a.out.join("detections.txt"), &dump)?;
    let gts: Vec<ImageGts> = dataset.iter().map(|s| ImageGts { gts: s.gts.clone(), size: s.native_size }).collect();
    let report = if a.coco {
        coco_ap(&dets, &gts, cfg.num_classes)
    } else {
        let mode = if a.eleven_point { Interpolation::ElevenPoint } else { Interpolation::AllPoint };
        voc_ap(&dets, &gts, cfg.num_classes, a.iou, mode)
    };
    let names = class_names(&a.data, cfg.num_classes);
    let table = report.to_table(&names);
    write(&a.out.join("report.txt"), &table)?;
    write(&a.out.join("report.kv"), &report.to_kv(&names))?;
    print!("{table}");
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let map = load_config_map(&a.config.config)?;
    let cfg = model_config(&map)?;
    require_file(&a.checkpoint, "checkpoint")?;
    let model = CvtAssd::new(&cfg, 0)?;
    checkpoint::load(&model, &a.checkpoint)?;
    let raw = image::load_ppm(&a.image)?;
    let resized = image::resize_bilinear(&raw, cfg.input_size, cfg.input_size)?;
    let anchors = generate_anchors(&AnchorConfig::from_model(&cfg)?)?;
    let batch = crate::tensor::reshape(&resized, &[1, 3, cfg.input_size, cfg.input_size])?;
    let dets = detect(&model, &batch, &anchors, &DetectConfig::default())?.remove(0);
    create_dir(&a.out)?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    write(&a.out.join(format!("{stem}.dets")), &format_dump(&stem, &dets))?;
    let mut annotated = raw;
    for d in dets.iter().filter(|d| d.score >= a.draw_threshold) {
        annotated = image::draw_box(&annotated, &d.bbox, image::class_color(d.class_id))?;
    }
    data::save_ppm(&annotated, &a.out.join(format!("{stem}_annotated.ppm")))?;
    println!("{} detections written to {}", dets.len(), a.out.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let map = load_config_map(&a.config.config)?;
    let mut cfg = model_config(&map)?;
    if let Some(s) = a.input_size {
        cfg.input_size = s;
    }
    let model = CvtAssd::new(&cfg, 0)?;
    print!("{}", inspect(&model)?.to_table());
    Ok(())
}
