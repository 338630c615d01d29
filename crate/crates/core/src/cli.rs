//! Command-line verbs: `synth`, `train`, `eval`, `localize`.
//!
//! Failures print one JSON line on stderr,
//! `{"error":"<kind>","exit_code":N,"message":"..."}`, and exit with
//!
//! | code | kind |
//! |------|------|
//! | 2 | config (bad file, unknown key, invalid value, usage) |
//! | 3 | data (missing or unreadable images and masks) |
//! | 4 | checkpoint (missing, corrupt, wrong version or mode) |
//! | 5 | numeric (non-finite losses or gradients) |
//! | 1 | anything else (I/O on outputs, internal) |

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::Mask;
use crate::config::{RunConfig, ECHO_FILE};
use crate::data::{self, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{self, EVAL_CHUNK};
use crate::imageio;
use crate::model::Mode;
use crate::training::{self, Checkpoint, Trainer};
use crate::visual;

#[derive(Debug, Parser)]
#[command(name = "attnvae", version, about = "Attention-guided VAE anomaly localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset in the folder layout.
    Synth(SynthArgs),
    /// Train one model on one category.
    Train(TrainArgs),
    /// Score a test split and write metric records.
    Eval(EvalArgs),
    /// Write heatmap, mask and overlay images for an image or directory.
    Localize(LocalizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.synthetic_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `model.mode`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the config echoed next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Must match the checkpoint when given.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file, or a directory searched recursively for images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Must match the checkpoint when given.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Process exit code of an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Ingestion { .. } | Error::Evaluation(_) | Error::Calibration(_) => 3,
        Error::Checkpoint(_) | Error::Integrity(_) | Error::Mode(_) => 4,
        Error::Numeric(_) => 5,
        Error::Shape(_) | Error::Io(_) => 1,
    }
}

fn kind(code: i32) -> &'static str {
    match code {
        2 => "config",
        3 => "data",
        4 => "checkpoint",
        5 => "numeric",
        _ => "internal",
    }
}

/// The machine-readable error line.
pub fn error_line(err: &Error) -> String {
    let code = exit_code(err);
    serde_json::json!({"error": kind(code), "exit_code": code, "message": err.to_string()}).to_string()
}

/// Parses `args` (including the program name), runs the verb and returns
/// the exit code, writing the error line to `stderr` on failure.
pub fn main_with_args<I, T>(args: I, stderr: &mut impl std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let err = Error::Config(e.to_string().lines().next().unwrap_or_default().to_string());
            let _ = writeln!(stderr, "{}", error_line(&err));
            return exit_code(&err);
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            let _ = writeln!(stderr, "{}", error_line(&err));
            exit_code(&err)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Localize(a) => cmd_localize(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.data.synthetic_seed = s;
    }
    let split = data::generate_synthetic(&cfg.data.synthetic, cfg.data.synthetic_seed)
        .map_err(|e| Error::Config(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    data::export_folder_dataset(&split, &a.out)?;
    cfg.echo(&a.out)
}

/// The test split of a weak run excludes the images drawn as training
/// labels; the draw is replayed from the seed and fraction.
fn prepare_split(split: DatasetSplit, mode: Mode, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    match mode {
        Mode::Unsupervised => Ok(split),
        Mode::Weak => data::sample_weak_training(&split, fraction, seed).map_err(|e| match e {
            Error::Argument(m) => Error::ingest(PathBuf::new(), m),
            other => other,
        }),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    cfg.validate()?;
    let split = data::load_folder_dataset(&a.data, cfg.model.image_size, cfg.model.channels)?;
    let split = prepare_split(split, cfg.model.mode, cfg.data.anomalous_fraction, cfg.train.seed)?;
    fs::create_dir_all(&a.out)?;
    cfg.echo(&a.out)?;
    let metrics = a.out.join("metrics.jsonl");
    if cfg.train.log_path.is_none() && metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let outcome = Trainer::new(&cfg.model, &cfg.train)?.fit(&split, Some(&a.out))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs, final total loss {:.6}, checkpoint {}",
            last.epoch,
            last.losses.total,
            a.out.join("model.ckpt").display()
        );
    }
    Ok(())
}

fn load_trained(path: &Path, mode: Option<Mode>) -> Result<Checkpoint> {
    let ckpt = training::load_checkpoint(path)?;
    if let Some(m) = mode {
        if m != ckpt.model_config.mode {
            return Err(Error::Mode(format!("--mode {m} given for a {} checkpoint", ckpt.model_config.mode)));
        }
    }
    if ckpt.calibration.is_none() {
        return Err(Error::Checkpoint(format!("{} has no score calibration (unfinished run?)", path.display())));
    }
    Ok(ckpt)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_trained(&a.checkpoint, a.mode)?;
    let echoed = a.checkpoint.parent().map(|d| d.join(ECHO_FILE)).filter(|p| p.is_file());
    let cfg = load_config(a.config.as_deref().or(echoed.as_deref()))?;
    let mc = &ckpt.model_config;
    let split = data::load_folder_dataset(&a.data, mc.image_size, mc.channels)?;
    let split = prepare_split(split, mc.mode, cfg.data.anomalous_fraction, ckpt.train_config.seed)?;
    let cal = ckpt.calibration.expect("checked in load_trained");
    let report = evaluation::evaluate(&ckpt.model(), &cal, &split.test, &cfg.eval)?;
    report.write(&a.out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn collect_images(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::ingest(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ["png", "jpg", "jpeg", "bmp"].contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Output stem for an input: its path relative to the input root with
/// separators flattened, so nested inputs cannot collide.
fn output_stem(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    let rel = if rel.as_os_str().is_empty() { Path::new(path.file_name().unwrap_or_default()) } else { rel };
    rel.with_extension("")
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("__")
}

pub fn cmd_localize(a: &LocalizeArgs) -> Result<()> {
    let ckpt = load_trained(&a.checkpoint, a.mode)?;
    let model = ckpt.model();
    let mc = &model.config;
    let mut inputs = Vec::new();
    if a.data.is_dir() {
        collect_images(&a.data, &mut inputs)?;
    } else if a.data.is_file() {
        inputs.push(a.data.clone());
    } else {
        return Err(Error::ingest(&a.data, "no such image or directory"));
    }
    if inputs.is_empty() {
        return Err(Error::ingest(&a.data, "no images found"));
    }
    fs::create_dir_all(&a.out)?;
    let mut records = fs::File::create(a.out.join("localize.jsonl"))?;
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|p| Ok(imageio::image_to_tensor(&imageio::open(p)?, mc.image_size, mc.channels)))
            .collect::<Result<Vec<_>>>()?;
        let x = crate::Tensor::stack(&images)?;
        let located = evaluation::localize(&model, &x, mc.mode)?;
        for ((path, img), (map, mask)) in chunk.iter().zip(&images).zip(&located) {
            let stem = output_stem(&a.data, path);
            imageio::save_png(&visual::heatmap(map), &a.out.join(format!("{stem}_heatmap.png")))?;
            imageio::save_png(
                &image::DynamicImage::ImageLuma8(imageio::mask_to_image(mask)),
                &a.out.join(format!("{stem}_mask.png")),
            )?;
            imageio::save_png(&visual::overlay(img, map)?, &a.out.join(format!("{stem}_overlay.png")))?;
            writeln!(records, "{}", record(path, &stem, mask))?;
        }
    }
    Ok(())
}

fn record(path: &Path, stem: &str, mask: &Mask) -> String {
    serde_json::json!({
        "input": path.display().to_string(),
        "output_stem": stem,
        "mask_fraction": mask.fraction(),
    })
    .to_string()
}
