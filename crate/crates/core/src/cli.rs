//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 pipeline
//! failure (for example a registration that produced no model), 3 I/O or
//! input-format error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detector::{evaluate_pair, Detector};
use crate::error::{Error, Result};
use crate::features::NmsConfig;
use crate::geometry::{read_homography, write_homography, HomographySampleRanges};
use crate::imaging::{enhance, load_image, preprocess, save_gray, AugmentationConfig, GrayImage, Image};
use crate::mosaic::{list_frames, register_sequence, render, MosaicConfig};
use crate::net::{ChannelPlan, Checkpoint};
use crate::registration::{violates_failure_rules, EvaluationReport, RansacConfig};
use crate::rng::indexed_stream;
use crate::training::{generate_pair, train, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "matchpoints", version, about = "Learned keypoint detection, registration and mosaicking")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize training pairs with their ground-truth homographies.
    GenPairs(GenPairsArgs),
    /// Train the detector.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory of pairs.
    Eval(EvalArgs),
    /// Estimate the homography between two images.
    Register(RegisterArgs),
    /// Register a frame sequence and render a mosaic.
    Mosaic(MosaicArgs),
}

#[derive(Debug, Args, Default)]
pub struct RangeArgs {
    #[arg(long)]
    pub scale_min: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    #[arg(long)]
    pub persp_min: Option<f64>,
    #[arg(long)]
    pub persp_max: Option<f64>,
    #[arg(long)]
    pub trans_max_x: Option<f64>,
    #[arg(long)]
    pub trans_max_y: Option<f64>,
    #[arg(long)]
    pub shear_min: Option<f64>,
    #[arg(long)]
    pub shear_max: Option<f64>,
    #[arg(long)]
    pub rot_max_deg: Option<f64>,
}

impl RangeArgs {
    fn apply(&self, r: &mut HomographySampleRanges) {
        let pairs = [
            (self.scale_min, &mut r.scale_min),
            (self.scale_max, &mut r.scale_max),
            (self.persp_min, &mut r.persp_min),
            (self.persp_max, &mut r.persp_max),
            (self.trans_max_x, &mut r.trans_max_x),
            (self.trans_max_y, &mut r.trans_max_y),
            (self.shear_min, &mut r.shear_min),
            (self.shear_max, &mut r.shear_max),
            (self.rot_max_deg, &mut r.rot_max_deg),
        ];
        for (v, dst) in pairs {
            if let Some(v) = v {
                *dst = v;
            }
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct AugArgs {
    /// Disable all appearance augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub select_prob: Option<f64>,
    #[arg(long)]
    pub invert_prob: Option<f64>,
}

impl AugArgs {
    fn apply(&self, a: &mut AugmentationConfig) {
        if self.no_augment {
            *a = AugmentationConfig::none();
        }
        if let Some(p) = self.select_prob {
            a.select_prob = p;
        }
        if let Some(p) = self.invert_prob {
            a.invert_prob = p;
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct NmsArgs {
    /// Suppression radius in pixels [default: 10].
    #[arg(long)]
    pub nms_window: Option<usize>,
    /// Minimum score of a keypoint [default: 0].
    #[arg(long)]
    pub nms_threshold: Option<f64>,
    /// Keypoints kept per image [default: 1000].
    #[arg(long)]
    pub max_keypoints: Option<usize>,
}

impl NmsArgs {
    fn resolve(&self) -> NmsConfig {
        let d = NmsConfig::default();
        NmsConfig {
            window: self.nms_window.unwrap_or(d.window),
            threshold: self.nms_threshold.unwrap_or(d.threshold),
            max_keypoints: self.max_keypoints.unwrap_or(d.max_keypoints),
        }
    }
}

#[derive(Debug, Args)]
pub struct RansacArgs {
    #[arg(long, default_value_t = 1000)]
    pub ransac_iters: usize,
    /// Inlier reprojection threshold in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub ransac_thresh: f64,
}

impl RansacArgs {
    fn resolve(&self) -> Result<RansacConfig> {
        if self.ransac_iters == 0 || !(self.ransac_thresh > 0.0) {
            return Err(Error::invalid("RANSAC needs iters >= 1 and a positive threshold"));
        }
        Ok(RansacConfig {
            iters: self.ransac_iters,
            inlier_thresh: self.ransac_thresh,
        })
    }
}

#[derive(Debug, Args)]
pub struct GenPairsArgs {
    /// Manifest of base images (one path per line) or a directory of images.
    #[arg(long)]
    pub bases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Side of the square crop [default: 256].
    #[arg(long)]
    pub crop: Option<usize>,
    /// Start from a previously written config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub ranges: RangeArgs,
    #[command(flatten)]
    pub aug: AugArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenPairsConfig {
    pub count: usize,
    pub crop: usize,
    pub seed: u64,
    pub ranges: HomographySampleRanges,
    pub augmentation: AugmentationConfig,
}

impl Default for GenPairsConfig {
    fn default() -> Self {
        GenPairsConfig {
            count: 0,
            crop: 256,
            seed: 0,
            ranges: HomographySampleRanges::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest of base images (one path per line) or a directory of images.
    #[arg(long)]
    pub bases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from a previously written config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Pairs per step [default: 5].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training crop side, a multiple of 16 [default: 256].
    #[arg(long)]
    pub crop: Option<usize>,
    /// [default: 35]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// True-positive distance in pixels [default: 3].
    #[arg(long)]
    pub eps: Option<f64>,
    /// Write a checkpoint every N steps (0: only initial and final).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Encoder widths, e.g. 8,16,32,64 (2,4,8,16 for desk-scale runs).
    #[arg(long)]
    pub channel_plan: Option<String>,
    #[command(flatten)]
    pub nms: NmsArgs,
    #[command(flatten)]
    pub ranges: RangeArgs,
    #[command(flatten)]
    pub aug: AugArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory holding pair_NNNNNN_{a,b}.pgm and pair_NNNNNN_h.txt.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// True-positive distance in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub eps: f64,
    /// Enhance inputs (green channel, CLAHE, bilateral filter) before detection.
    #[arg(long)]
    pub preprocess: bool,
    #[command(flatten)]
    pub nms: NmsArgs,
    #[command(flatten)]
    pub ransac: RansacArgs,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output homography file (maps pixels of A to pixels of B).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preprocess: bool,
    #[command(flatten)]
    pub nms: NmsArgs,
    #[command(flatten)]
    pub ransac: RansacArgs,
}

#[derive(Debug, Args)]
pub struct MosaicArgs {
    /// Directory of frames (lexicographic order) or a manifest file.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for mosaic.pgm, summary.json and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub preprocess: bool,
    #[command(flatten)]
    pub nms: NmsArgs,
    #[command(flatten)]
    pub ransac: RansacArgs,
}

/// Raised by subcommands whose pipeline ran but produced no result.
#[derive(Debug)]
struct PipelineFailure(String);

enum Failure {
    Lib(Error),
    Pipeline(PipelineFailure),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::Checkpoint(_) => EXIT_IO,
        Error::Frame { source, .. } => exit_code(source),
        Error::NonInvertible
        | Error::PointAtInfinity
        | Error::DegenerateSample
        | Error::Dimension(_)
        | Error::NoTrainablePoints => EXIT_PIPELINE,
    }
}

fn init_logging(level: &str) -> std::result::Result<(), String> {
    let filter: log::LevelFilter = level.parse().map_err(|_| format!("unknown log level {level:?}"))?;
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format(|buf, rec| {
            let line = json!({
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init();
    log::set_max_level(filter);
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = init_logging(&cli.log_level) {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    let outcome = pool.install(|| dispatch(&cli));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Pipeline(PipelineFailure(msg))) => {
            eprintln!("error: {msg}");
            EXIT_PIPELINE
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    let seed = cli.seed;
    match &cli.command {
        Command::GenPairs(a) => cmd_gen_pairs(cli, a, seed).map_err(Failure::from),
        Command::Train(a) => cmd_train(cli, a, seed).map_err(Failure::from),
        Command::Eval(a) => cmd_eval(cli, a, seed.unwrap_or(0)).map_err(Failure::from),
        Command::Register(a) => cmd_register(cli, a, seed.unwrap_or(0)),
        Command::Mosaic(a) => cmd_mosaic(cli, a, seed.unwrap_or(0)).map_err(Failure::from),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    crate::io_util::write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `<file>.config.json` next to a file output.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn globals(cli: &Cli, command: &str, seed: u64) -> serde_json::Value {
    json!({
        "command": command,
        "seed": seed,
        "threads": cli.threads,
        "log_level": cli.log_level,
    })
}

fn merge(mut base: serde_json::Value, extra: serde_json::Value) -> serde_json::Value {
    if let (Some(b), serde_json::Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

/// Paths listed in a manifest (one per line, `#` comments, relative to the
/// manifest's directory) or the image files of a directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        return list_frames(path);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| root.join(l))
        .collect())
}

fn load_bases(manifest: &Path) -> Result<(Vec<PathBuf>, Vec<GrayImage>)> {
    let paths = read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("{}: no base images listed", manifest.display())));
    }
    let imgs = paths
        .iter()
        .map(|p| load_image(p).map(Image::into_gray))
        .collect::<Result<Vec<_>>>()?;
    Ok((paths, imgs))
}

/// Test-time enhancement: green channel (for color inputs), CLAHE, bilateral filter.
fn load_input(path: &Path, enhanced: bool) -> Result<GrayImage> {
    Ok(match (load_image(path)?, enhanced) {
        (Image::Rgb(c), true) => preprocess(&c),
        (Image::Gray(g), true) => enhance(&g),
        (img, false) => img.into_gray(),
    })
}

fn read_config_section<T: for<'de> Deserialize<'de>>(path: &Path, key: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let section = v.get(key).cloned().unwrap_or(v);
    serde_json::from_value(section).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn pair_file_stem(k: usize) -> String {
    format!("pair_{k:06}")
}

fn cmd_gen_pairs(cli: &Cli, a: &GenPairsArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config_section::<GenPairsConfig>(p, "gen_pairs")?,
        None => GenPairsConfig::default(),
    };
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(c) = a.crop {
        cfg.crop = c;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    a.ranges.apply(&mut cfg.ranges);
    a.aug.apply(&mut cfg.augmentation);
    cfg.ranges.validate()?;
    cfg.augmentation.validate()?;
    let (paths, bases) = load_bases(&a.bases)?;
    create_dir(&a.out)?;
    let config = merge(
        globals(cli, "gen-pairs", cfg.seed),
        json!({ "bases": paths, "out": a.out, "gen_pairs": cfg }),
    );
    write_json(&a.out.join("config.json"), &config)?;
    (0..cfg.count).into_par_iter().try_for_each(|k| -> Result<()> {
        let mut rng = indexed_stream(cfg.seed, "gen-pairs", k as u64);
        let p = generate_pair(&bases[k % bases.len()], &cfg.ranges, &cfg.augmentation, cfg.crop, &mut rng)?;
        let stem = pair_file_stem(k);
        save_gray(&p.a, &a.out.join(format!("{stem}_a.pgm")))?;
        save_gray(&p.b, &a.out.join(format!("{stem}_b.pgm")))?;
        write_homography(&a.out.join(format!("{stem}_h.txt")), &p.h)
    })?;
    log::info!("wrote {} pairs to {}", cfg.count, a.out.display());
    Ok(())
}

fn parse_plan(s: &str) -> Result<ChannelPlan> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("channel plan {s:?}: {e}")))?;
    let arr: [usize; 4] = v
        .try_into()
        .map_err(|_| Error::invalid(format!("channel plan {s:?} needs 4 widths")))?;
    let plan = ChannelPlan(arr);
    plan.validate()?;
    Ok(plan)
}

/// Training configuration from defaults, an optional config file and flags.
pub fn resolve_train_config(a: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_config_section::<TrainConfig>(p, "train")?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(batch_size, crop, epochs, lr, beta1, beta2, adam_eps, eps, checkpoint_every);
    if let Some(v) = a.nms.nms_window {
        cfg.nms_window = v;
    }
    if let Some(v) = a.nms.nms_threshold {
        cfg.nms_threshold = v;
    }
    if let Some(v) = a.nms.max_keypoints {
        cfg.max_keypoints = v;
    }
    if let Some(s) = &a.channel_plan {
        cfg.channel_plan = parse_plan(s)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    a.ranges.apply(&mut cfg.ranges);
    a.aug.apply(&mut cfg.augmentation);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_train_config(a, seed)?;
    let (paths, bases) = load_bases(&a.bases)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg.clone(), Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    create_dir(&a.out)?;
    let config = merge(
        globals(cli, "train", cfg.seed),
        json!({ "bases": paths, "out": a.out, "resume": a.resume, "train": cfg }),
    );
    write_json(&a.out.join("config.json"), &config)?;
    log::info!(
        "training {} steps from step {} ({} parameters)",
        trainer.total_steps(bases.len()),
        trainer.step,
        trainer.net.num_parameters()
    );
    let out = train(&bases, &mut trainer, &a.out)?;
    log::info!("final checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn load_detector(path: &Path, nms: NmsConfig) -> Result<Detector> {
    let ck = Checkpoint::load(path)?;
    Ok(Detector::new(ck.net, nms))
}

/// Pair stems found in an evaluation directory, sorted.
pub fn list_pairs(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix("_h.txt")) {
            stems.push(stem.to_owned());
        }
    }
    stems.sort();
    Ok(stems)
}

fn pair_image(dir: &Path, stem: &str, side: &str) -> PathBuf {
    let pgm = dir.join(format!("{stem}_{side}.pgm"));
    if pgm.exists() {
        return pgm;
    }
    for ext in ["png", "ppm"] {
        let p = dir.join(format!("{stem}_{side}.{ext}"));
        if p.exists() {
            return p;
        }
    }
    pgm
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, seed: u64) -> Result<()> {
    let nms = a.nms.resolve();
    let ransac = a.ransac.resolve()?;
    if !(a.eps >= 0.0) {
        return Err(Error::invalid("eps must be >= 0"));
    }
    let detector = load_detector(&a.checkpoint, nms)?;
    let stems = list_pairs(&a.pairs)?;
    let config = merge(
        globals(cli, "eval", seed),
        json!({
            "pairs": a.pairs, "checkpoint": a.checkpoint, "out": a.out, "eps": a.eps,
            "preprocess": a.preprocess, "nms": nms, "ransac": ransac,
        }),
    );
    let records = stems
        .par_iter()
        .enumerate()
        .map(|(i, stem)| {
            let img_a = load_input(&pair_image(&a.pairs, stem, "a"), a.preprocess)?;
            let img_b = load_input(&pair_image(&a.pairs, stem, "b"), a.preprocess)?;
            let h_gt = read_homography(&a.pairs.join(format!("{stem}_h.txt")))?;
            let mut rng = indexed_stream(seed, "ransac", i as u64);
            let (m, _) = evaluate_pair(stem, &detector, &img_a, &img_b, &h_gt, a.eps, &ransac, &mut rng)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvaluationReport::from_pairs(records);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&sidecar(&a.out, ".config.json"), &config)?;
    write_json(&a.out, &report)?;
    log::info!(
        "{} pairs: {:.1}% acceptable, {:.1}% inaccurate, {:.1}% failed",
        report.n_pairs,
        report.acceptable_pct,
        report.inaccurate_pct,
        report.failed_pct
    );
    Ok(())
}

fn cmd_register(cli: &Cli, a: &RegisterArgs, seed: u64) -> std::result::Result<(), Failure> {
    let nms = a.nms.resolve();
    let ransac = a.ransac.resolve()?;
    let detector = load_detector(&a.checkpoint, nms)?;
    let img_a = load_input(&a.a, a.preprocess)?;
    let img_b = load_input(&a.b, a.preprocess)?;
    let config = merge(
        globals(cli, "register", seed),
        json!({
            "a": a.a, "b": a.b, "checkpoint": a.checkpoint, "out": a.out,
            "preprocess": a.preprocess, "nms": nms, "ransac": ransac,
        }),
    );
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&sidecar(&a.out, ".config.json"), &config)?;
    let mut rng = indexed_stream(seed, "ransac", 0);
    let reg = detector.register(&img_a, &img_b, &ransac, &mut rng)?;
    log::info!(
        "{} + {} keypoints, {} matches",
        reg.a.keypoints.len(),
        reg.b.keypoints.len(),
        reg.matches.len()
    );
    match reg.estimate {
        Some((h, inliers)) if !violates_failure_rules(&h) => {
            log::info!("{} inliers", inliers.len());
            write_homography(&a.out, &h)?;
            Ok(())
        }
        _ => Err(Failure::Pipeline(PipelineFailure("registration failed".into()))),
    }
}

fn cmd_mosaic(cli: &Cli, a: &MosaicArgs, seed: u64) -> Result<()> {
    let nms = a.nms.resolve();
    let ransac = a.ransac.resolve()?;
    let detector = load_detector(&a.checkpoint, nms)?;
    let paths = read_manifest(&a.frames)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("{}: no frames found", a.frames.display())));
    }
    let frames = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            load_input(p, a.preprocess).map_err(|e| Error::Frame {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = MosaicConfig { ransac, seed };
    create_dir(&a.out)?;
    let config = merge(
        globals(cli, "mosaic", seed),
        json!({
            "frames": paths, "checkpoint": a.checkpoint, "out": a.out,
            "preprocess": a.preprocess, "nms": nms, "mosaic": cfg,
        }),
    );
    write_json(&a.out.join("config.json"), &config)?;
    let state = register_sequence(&frames, &detector, &cfg)?;
    let canvas = render(&state, &frames)?;
    save_gray(&canvas, &a.out.join("mosaic.pgm"))?;
    write_json(&a.out.join("summary.json"), &state.summary())?;
    log::info!(
        "registered {} of {} frames, canvas {}x{}",
        state.frames_registered,
        frames.len(),
        state.canvas_w,
        state.canvas_h
    );
    Ok(())
}
