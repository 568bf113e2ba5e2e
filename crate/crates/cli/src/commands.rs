use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use gasformer::checkpoint::{load_checkpoint, save_checkpoint, LoadOptions};
use gasformer::dataset::{load_image, scan_and_split, write_synthetic_dataset, ClassMap, Manifest, Mask, Sample, Split};
use gasformer::labeler::{load_frames, run_pipeline};
use gasformer::network::{analytic_param_count, count_flops};
use gasformer::training::{evaluate, train, LogEvent, OptimState};
use gasformer::{Model, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::{Cli, CliError, Command, GlobalArgs};

type CmdResult = Result<(), CliError>;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (uses manifest.json when present, otherwise scans and splits).
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long, conflicts_with = "init")]
    pub resume: Option<PathBuf>,
    /// Initialize weights from a checkpoint before training.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// With --init, allow a different class count by reinitializing the classifier.
    #[arg(long, requires = "init")]
    pub reinit_head: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A PNG image or a directory of PNG images.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Directory of plume frames.
    #[arg(long)]
    pub frames: PathBuf,
    /// Directory of plume-free background frames.
    #[arg(long)]
    pub background: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total classes including background; 11 uses the flow-rate class names.
    #[arg(long, default_value_t = 11)]
    pub classes: usize,
    #[arg(long)]
    pub count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Read the model configuration from a checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Square input side used for FLOP counting.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Also list the per-layer breakdown.
    #[arg(long)]
    pub breakdown: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Free-form description of the machine, echoed in the report.
    #[arg(long, default_value = "unspecified")]
    pub hardware: String,
    #[arg(long)]
    pub json: bool,
}

/// Model accounting shared by `inspect` and `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub params: usize,
    pub gflops: f64,
    pub convention: String,
    pub input: [usize; 2],
}

pub fn accounting(cfg: &ModelConfig, size: usize) -> Result<Accounting, CliError> {
    let flops = count_flops(cfg, size, size)?;
    Ok(Accounting { params: analytic_param_count(cfg), gflops: flops.gflops(), convention: flops.convention, input: [size, size] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub hardware: String,
    pub warmup: usize,
    pub repetitions: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    #[serde(flatten)]
    pub accounting: Accounting,
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let g = &cli.global;
    let cfg = AppConfig::load(g.config.as_deref(), &g.overrides)?;
    match &cli.command {
        Command::Train(a) => cmd_train(g, &cfg, a, out),
        Command::Eval(a) => cmd_eval(g, &cfg, a, out),
        Command::Infer(a) => cmd_infer(g, a, out),
        Command::Label(a) => cmd_label(g, &cfg, a, out),
        Command::Synth(a) => cmd_synth(g, &cfg, a, out),
        Command::Inspect(a) => cmd_inspect(&cfg, a, out),
        Command::Bench(a) => cmd_bench(g, &cfg, a, out),
    }
}

fn out_dir(g: &GlobalArgs) -> Result<&Path, CliError> {
    let dir = g.out.as_deref().ok_or_else(|| CliError::Usage("this command needs --out".into()))?;
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn open_manifest(root: &Path, seed: u64) -> Result<Manifest, CliError> {
    let path = root.join("manifest.json");
    let mut m = if path.is_file() { Manifest::load(&path)? } else { scan_and_split(root, seed)? };
    m.root = root.to_path_buf();
    Ok(m)
}

fn load_split(m: &Manifest, split: Split, ignore: u8) -> Result<Vec<Sample>, CliError> {
    Ok(m.split(split).into_iter().map(|e| m.load_sample(e, ignore)).collect::<gasformer::Result<_>>()?)
}

fn load_model(path: &Path) -> Result<Model<f32>, CliError> {
    Ok(load_checkpoint(path, &LoadOptions::default())?.model)
}

/// Appends lines to `path`, writing `header` first when the file is new.
fn log_file(path: &Path, header: &str) -> Result<BufWriter<File>, CliError> {
    let fresh = !path.exists();
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn cmd_train(g: &GlobalArgs, cfg: &AppConfig, a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(g)?;
    let manifest = open_manifest(&a.data, g.seed)?;

    let (model, resume): (Model<f32>, Option<(usize, OptimState)>) = if let Some(path) = &a.resume {
        let loaded = load_checkpoint(path, &LoadOptions::default())?;
        let iter = loaded.iteration.ok_or_else(|| CliError::data("resume checkpoint has no iteration"))?;
        let opt = loaded.optimizer.ok_or_else(|| CliError::data("resume checkpoint has no optimizer state"))?;
        (loaded.model, Some((iter as usize, opt)))
    } else if let Some(path) = &a.init {
        let opts = LoadOptions { config: Some(cfg.model.clone()), reinit_head: a.reinit_head, seed: g.seed };
        (load_checkpoint(path, &opts)?.model, None)
    } else {
        (Model::build(&cfg.model, g.seed)?, None)
    };
    let classes = model.config.num_classes;
    if manifest.classes.len() != classes {
        return Err(CliError::data(format!(
            "model.num_classes is {classes} but the dataset defines {} classes",
            manifest.classes.len()
        )));
    }
    let ignore = model.config.ignore_index;
    let train_set = load_split(&manifest, Split::Train, ignore)?;
    let val_set = load_split(&manifest, Split::Val, ignore)?;
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());

    fs::write(dir.join("config.json"), cfg.to_json())?;
    let mut steps = log_file(&dir.join("train_log.csv"), "iter,lr,loss")?;
    let mut vals = log_file(&dir.join("val_log.csv"), "iter,mIoU,mFscore")?;
    let mut io_error = None;
    let outcome = train(model, train_set.as_slice(), val, &cfg.train, g.seed, resume, |e| {
        let sink = match e {
            LogEvent::Step(_) => &mut steps,
            LogEvent::Validation(_) => &mut vals,
        };
        if let Err(err) = writeln!(sink, "{}", e.line()) {
            io_error.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    steps.flush()?;
    vals.flush()?;

    let total = cfg.train.schedule.total_iters as u64;
    save_checkpoint(&dir.join("model.ckpt"), &outcome.model, Some(total), Some(&outcome.optimizer))?;
    writeln!(out, "trained {} iterations on {} samples", outcome.log.steps.len(), train_set.len())?;
    if let Some(v) = val {
        let (_, report) = evaluate(&outcome.model, v)?;
        fs::write(dir.join("metrics.json"), report.to_json())?;
        writeln!(out, "val mIoU {:.4} mFscore {:.4}", report.miou, report.mfscore)?;
    }
    writeln!(out, "checkpoint {}", dir.join("model.ckpt").display())?;
    Ok(())
}

fn cmd_eval(g: &GlobalArgs, _cfg: &AppConfig, a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    let manifest = open_manifest(&a.data, g.seed)?;
    if manifest.classes.len() != model.config.num_classes {
        return Err(CliError::data(format!(
            "checkpoint has {} classes but the dataset defines {}",
            model.config.num_classes,
            manifest.classes.len()
        )));
    }
    let samples = load_split(&manifest, a.split.into(), model.config.ignore_index)?;
    if samples.is_empty() {
        return Err(CliError::data("the selected split is empty"));
    }
    let (_, report) = evaluate(&model, samples.as_slice())?;
    write!(out, "{}", report.to_table(manifest.classes.names()))?;
    if let Some(path) = &g.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, report.to_json())?;
    }
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::data(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("no PNG images in {}", input.display())));
    }
    Ok(files)
}

fn file_name(p: &Path) -> &std::ffi::OsStr {
    p.file_name().expect("listed files have names")
}

fn cmd_infer(g: &GlobalArgs, a: &InferArgs, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(g)?;
    let model = load_model(&a.checkpoint)?;
    let files = png_inputs(&a.input)?;
    for path in &files {
        let image = model.normalize_image(&load_image(path)?)?;
        let pred = model.infer(&image, false)?;
        Mask::new(pred.width, pred.height, pred.labels)?.save_png(&dir.join(file_name(path)))?;
    }
    writeln!(out, "wrote {} masks to {}", files.len(), dir.display())?;
    Ok(())
}

fn cmd_label(g: &GlobalArgs, cfg: &AppConfig, a: &LabelArgs, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(g)?;
    let (_, backgrounds) = load_frames(&a.background)?;
    let (paths, frames) = load_frames(&a.frames)?;
    let masks = run_pipeline(&backgrounds, &frames, &cfg.labeler)?;
    for (path, mask) in paths.iter().zip(&masks) {
        mask.save_png(&dir.join(file_name(path)))?;
    }
    writeln!(out, "wrote {} masks to {}", masks.len(), dir.display())?;
    Ok(())
}

fn cmd_synth(g: &GlobalArgs, cfg: &AppConfig, a: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(g)?;
    if a.classes < 2 {
        return Err(CliError::data("--classes must be at least 2"));
    }
    let classes = if a.classes == 11 { ClassMap::methane_release() } else { ClassMap::levels(a.classes - 1)? };
    let m = write_synthetic_dataset(dir, &classes, a.count, a.size, a.size, g.seed, &cfg.synth)?;
    let [tr, va, te] = m.counts();
    writeln!(out, "wrote {} samples ({tr} train, {va} val, {te} test) to {}", m.entries.len(), dir.display())?;
    Ok(())
}

fn model_config(cfg: &AppConfig, checkpoint: Option<&Path>) -> Result<ModelConfig, CliError> {
    Ok(match checkpoint {
        Some(p) => load_model(p)?.config,
        None => cfg.model.clone(),
    })
}

fn cmd_inspect(cfg: &AppConfig, a: &InspectArgs, out: &mut dyn Write) -> CmdResult {
    let model_cfg = model_config(cfg, a.checkpoint.as_deref())?;
    let acc = accounting(&model_cfg, a.size)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&acc).expect("serializes"))?;
        return Ok(());
    }
    writeln!(out, "parameters: {} ({:.3} M)", acc.params, acc.params as f64 / 1e6)?;
    writeln!(out, "GFLOPs: {:.3} at {}x{} [{}]", acc.gflops, a.size, a.size, acc.convention)?;
    if a.breakdown {
        for (name, macs) in count_flops(&model_cfg, a.size, a.size)?.entries {
            writeln!(out, "  {name:<40} {macs:>14}")?;
        }
    }
    Ok(())
}

fn cmd_bench(g: &GlobalArgs, cfg: &AppConfig, a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    if a.reps == 0 {
        return Err(CliError::data("--reps must be positive"));
    }
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Model::build(&cfg.model, g.seed)?,
    };
    let acc = accounting(&model.config, a.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let raw = Tensor::from_fn(vec![3, a.size, a.size], |_| rng.gen_range(0.0f32..255.0));
    let image = model.normalize_image(&raw)?;
    for _ in 0..a.warmup {
        model.infer(&image, false)?;
    }
    let mut samples_ms = Vec::with_capacity(a.reps);
    for _ in 0..a.reps {
        let t = Instant::now();
        model.infer(&image, false)?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let total_ms: f64 = samples_ms.iter().sum();
    let report = BenchReport {
        hardware: a.hardware.clone(),
        warmup: a.warmup,
        repetitions: a.reps,
        mean_ms: total_ms / a.reps as f64,
        min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: samples_ms.iter().copied().fold(0.0, f64::max),
        fps: a.reps as f64 / (total_ms / 1e3),
        samples_ms,
        accounting: acc,
    };
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("serializes"))?;
    } else {
        writeln!(out, "hardware: {}", report.hardware)?;
        writeln!(out, "input: {}x{}, warmup {}, repetitions {}", a.size, a.size, a.warmup, a.reps)?;
        writeln!(out, "latency ms: mean {:.3} min {:.3} max {:.3}", report.mean_ms, report.min_ms, report.max_ms)?;
        writeln!(out, "FPS: {:.2}", report.fps)?;
        writeln!(out, "parameters: {} | GFLOPs: {:.3} [{}]", report.accounting.params, report.accounting.gflops, report.accounting.convention)?;
    }
    Ok(())
}
