//! `skinseg` command-line front end: train, predict, score, gradcheck, synth.

pub mod config;
pub mod overlay;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use skinseg_core::checkpoint::{self, Checkpoint};
use skinseg_core::data::synth::{self, SynthOptions};
use skinseg_core::data::{self, DatasetManifest};
use skinseg_core::gradcheck;
use skinseg_core::metrics;
use skinseg_core::optim::SgdState;
use skinseg_core::train::{self, Trainer};
use skinseg_core::{Error, FcnModel};

use config::{ConfigFile, Overrides, Preset, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "skinseg", version, about = "Skip-layer FCN for binary skin-lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a manifest of image/mask pairs.
    Train(TrainArgs),
    /// Predict lesion masks for one or more images.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Score(ScoreArgs),
    /// Finite-difference check of every operator and the end-to-end network.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic image/mask dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key=value` config file; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Initial weights: a full checkpoint resumes training, a partial one is
    /// imported for transfer learning.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Square training resolution (multiple of 32).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of epochs already completed, when resuming.
    #[arg(long, default_value_t = 0)]
    pub start_epoch: u64,
    /// Per-epoch log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(long, num_args = 1.., required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<id>_overlay.png` with the predicted contour in red.
    #[arg(long)]
    pub overlay: bool,
    /// Ground-truth mask directory; its contours are drawn in blue on the overlay.
    #[arg(long, requires = "overlay")]
    pub gt: Option<PathBuf>,
    /// Run the network at this square size and resize the mask back.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Adds an operator with a wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Draw hair-like arcs over some images.
    #[arg(long)]
    pub hair: bool,
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                Error::NonFinite { .. } => EXIT_CHECK,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<clap::Error>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Err(Error::Config("threads must be >= 1".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot start worker threads")?;
    Ok(pool.install(f))
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(args) => {
            let cfg = resolve_train(args)?;
            with_threads(cfg.threads, || cmd_train(&cfg))?.map(|_| EXIT_OK)
        }
        Command::Predict(args) => with_threads(args.threads, || cmd_predict(&args))?.map(|_| EXIT_OK),
        Command::Score(args) => cmd_score(&args).map(|_| EXIT_OK),
        Command::Gradcheck(args) => with_threads(args.threads, || cmd_gradcheck(args.seed, args.inject_fault))?,
        Command::Synth(args) => cmd_synth(&args).map(|_| EXIT_OK),
    }
}

pub fn resolve_train(args: TrainArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let flags = Overrides {
        preset: args.preset,
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        batch_size: args.batch_size,
        seed: args.seed,
        size: args.size,
        threads: args.threads,
        manifest: args.manifest,
        init: args.init,
        out: args.out,
    };
    Ok(RunConfig::resolve(flags, file, args.epochs, args.start_epoch, args.log)?)
}

/// Builds the model and optimizer state a training run starts from.
pub fn initial_state(cfg: &RunConfig, samples: &[data::Sample]) -> Result<(FcnModel<f32>, SgdState<f32>)> {
    let mut model = FcnModel::<f32>::build(cfg.preset.architecture(), cfg.seed)?;
    model.means = data::channel_means(samples)?;
    let Some(init) = &cfg.init else {
        let state = SgdState::new(model.params());
        return Ok((model, state));
    };
    let ckpt = Checkpoint::load(init)?;
    let report = checkpoint::import_weights(&mut model, &ckpt, true)
        .with_context(|| format!("cannot initialise from {}", init.display()))?;
    if report.missing.is_empty() {
        let (restored, state) = checkpoint::restore_model::<f32>(&ckpt)?;
        info!("resuming from {} ({} tensors)", init.display(), report.loaded.len());
        let state = state.unwrap_or_else(|| SgdState::new(restored.params()));
        Ok((restored, state))
    } else {
        info!(
            "imported {} tensors from {}; {} keep their fresh initialisation",
            report.loaded.len(),
            init.display(),
            report.missing.len()
        );
        let state = SgdState::new(model.params());
        Ok((model, state))
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let samples = data::load_manifest(&manifest, (cfg.size, cfg.size))?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("manifest {} lists no samples", cfg.manifest.display())).into());
    }
    let (model, state) = initial_state(cfg, &samples)?;
    let mut trainer = Trainer::new(model, cfg.sgd, cfg.seed)?;
    trainer.state = state;

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&cfg.log)
        .map_err(|e| Error::io(&cfg.log, e))?;
    info!(
        "training {} preset on {} samples at {}x{} for {} epochs",
        cfg.preset,
        samples.len(),
        cfg.size,
        cfg.size,
        cfg.epochs
    );
    let start = Instant::now();
    for epoch in cfg.start_epoch..cfg.start_epoch + cfg.epochs {
        let stats = trainer.epoch(&samples, epoch)?;
        checkpoint::save_checkpoint(&trainer.model, Some(&trainer.state), &cfg.out)?;
        let line = format!("{},{},{}", epoch + 1, stats.mean_loss, stats.train_ja);
        writeln!(log, "{line}").map_err(|e| Error::io(&cfg.log, e))?;
        println!("epoch {:>4}  loss {:.6}  train JA {:.4}  ({:.1}s)", epoch + 1, stats.mean_loss, stats.train_ja, start.elapsed().as_secs_f64());
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(sorted_dir(p)?);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset("no input images found".into()).into());
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Sample id of a mask file: its stem without a `_segmentation` or `_mask` suffix.
pub fn mask_id(path: &Path) -> String {
    let s = stem(path);
    for suffix in ["_segmentation", "_mask"] {
        if let Some(id) = s.strip_suffix(suffix) {
            return id.to_string();
        }
    }
    s
}

fn find_gt(dir: &Path, id: &str) -> Result<PathBuf> {
    for name in [format!("{id}.png"), format!("{id}_segmentation.png"), format!("{id}_mask.png")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Dataset(format!("no ground-truth mask for {id} in {}", dir.display())).into())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    if let Some(size) = args.size {
        if size == 0 || size % 32 != 0 {
            return Err(Error::Config(format!("--size must be a positive multiple of 32, got {size}")).into());
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for path in expand_inputs(&args.input)? {
        let rgb = data::read_rgb(&path)?;
        let (w, h) = rgb.dimensions();
        let mask = match args.size {
            Some(s) => {
                let x = data::rgb_to_tensor(&data::resize_rgb(&rgb, s as u32, s as u32));
                data::resize_mask(&train::predict(&model, &x)?, h as usize, w as usize)
            }
            None => train::predict(&model, &data::rgb_to_tensor(&rgb))?,
        };
        let id = stem(&path);
        let mask_path = args.out.join(format!("{id}.png"));
        data::write_mask_png(&mask, &mask_path)?;
        if args.overlay {
            let gt = match &args.gt {
                Some(dir) => {
                    let gt_path = find_gt(dir, &id)?;
                    let gt = data::read_mask_png(&gt_path)?;
                    if gt.dims() != mask.dims() {
                        return Err(Error::data(&gt_path, format!("mask is {:?}, image is {:?}", gt.dims(), mask.dims())).into());
                    }
                    Some(gt)
                }
                None => None,
            };
            let out_path = args.out.join(format!("{id}_overlay.png"));
            overlay::draw_contours(&rgb, &mask, gt.as_ref())
                .save(&out_path)
                .map_err(|e| Error::data(&out_path, format!("cannot write overlay: {e}")))?;
        }
        println!("{} -> {}", path.display(), mask_path.display());
    }
    Ok(())
}

fn mask_files(dir: &Path, skip_overlays: bool) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in sorted_dir(dir)? {
        if skip_overlays && stem(&p).ends_with("_overlay") {
            continue;
        }
        if let Some(prev) = out.insert(mask_id(&p), p.clone()) {
            return Err(Error::Dataset(format!("{} and {} map to the same id", prev.display(), p.display())).into());
        }
    }
    Ok(out)
}

pub fn cmd_score(args: &ScoreArgs) -> Result<metrics::AggregateReport> {
    let pred = mask_files(&args.pred, true)?;
    let gt = mask_files(&args.gt, false)?;
    let only_pred: Vec<&str> = pred.keys().filter(|k| !gt.contains_key(*k)).map(String::as_str).collect();
    let only_gt: Vec<&str> = gt.keys().filter(|k| !pred.contains_key(*k)).map(String::as_str).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        let mut msg = String::from("unmatched ids;");
        if !only_pred.is_empty() {
            msg.push_str(&format!(" no ground truth for: {}.", only_pred.join(", ")));
        }
        if !only_gt.is_empty() {
            msg.push_str(&format!(" no prediction for: {}.", only_gt.join(", ")));
        }
        return Err(Error::Dataset(msg).into());
    }
    if pred.is_empty() {
        return Err(Error::Dataset(format!("no masks in {}", args.pred.display())).into());
    }
    let mut per_image = Vec::with_capacity(pred.len());
    for (id, p) in &pred {
        let pm = data::read_mask_png(p)?;
        let gm = data::read_mask_png(&gt[id])?;
        let c = metrics::confusion_counts(&pm, &gm).with_context(|| format!("scoring {id}"))?;
        per_image.push(metrics::compute_metrics(id.clone(), &c));
    }
    let report = metrics::aggregate(per_image)?;
    metrics::write_report(&report, &args.out)?;
    println!("mean JA {:.6} over {} images", report.ranking_key(), report.images.len());
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64, inject_fault: bool) -> Result<i32> {
    let mut suite = gradcheck::standard_suite();
    if inject_fault {
        warn!("running with a deliberately broken operator");
        suite.push(gradcheck::faulty_check());
    }
    let results = gradcheck::run_suite(&suite, seed)?;
    println!("{:<24} {:>6} {:>14}  status", "check", "seed", "max rel err");
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += !r.passed() as usize;
        println!("{:<24} {:>6} {:>14.3e}  {status}", r.name, r.seed, r.max_rel_error);
    }
    if failed > 0 {
        println!("{failed} of {} checks exceed {:e}", results.len(), gradcheck::TOLERANCE);
        return Ok(EXIT_CHECK);
    }
    println!("all {} checks below {:e}", results.len(), gradcheck::TOLERANCE);
    Ok(EXIT_OK)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let opts = SynthOptions {
        hair: args.hair,
        ..SynthOptions::default()
    };
    let manifest = synth::synth_generate(args.count, args.size, args.seed, &args.out, &opts)?;
    let path = args.out.join("manifest.tsv");
    manifest.save(&path)?;
    println!("wrote {} samples, manifest {}", manifest.len(), path.display());
    Ok(path)
}
