//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data or format,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bottleneck::{BranchKind, Noise};
use crate::error::{Error, Result};
use crate::evaluation::{
    disentanglement_probe, evaluate_pairs, load_square, mi_table, mi_tables_csv, sample_protocol, Probe,
};
use crate::heatmap::export_info;
use crate::imageio::{load_image, pad_to_multiple, save_image};
use crate::model::Model;
use crate::tensor::ImageTensor;
use crate::training::{load_model, run_training, Ablation, TrainConfig};
use crate::transfer::InterpolationWeights;
use crate::data::scan_images;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "infostyler", version, about = "Style transfer with information bottlenecks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the bottlenecks, transfer and decoder on content/style folders.
    Train(TrainArgs),
    /// Stylize one content image with one style image.
    Stylize(StylizeArgs),
    /// Stylize with a weighted mix of styles, or sweep the weights.
    Interpolate(InterpolateArgs),
    /// Export per-level information heatmaps (bits) and an MI table.
    InspectInfo(InspectArgs),
    /// Score a checkpoint on a seeded sample of content/style pairs.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` configuration file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub content_dir: Option<PathBuf>,
    #[arg(long)]
    pub style_dir: Option<PathBuf>,
    /// Output directory for logs, previews and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of optimization steps [default: 10000].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training crop size; also sets the resize to twice this unless --resize is given [default: 256].
    #[arg(long)]
    pub size: Option<u32>,
    /// Short-side resize before cropping [default: 512].
    #[arg(long)]
    pub resize: Option<u32>,
    /// Batch size [default: 2].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate [default: 0.0001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// `tiny` or a path to an encoder archive [default: tiny].
    #[arg(long)]
    pub encoder: Option<String>,
    /// Seed for initialization, sampling and noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub lambda_info: Option<f64>,
    #[arg(long)]
    pub lambda_content: Option<f64>,
    #[arg(long)]
    pub lambda_style: Option<f64>,
    #[arg(long)]
    pub lambda_rec: Option<f64>,
    /// Named ablation: full, no-cib, no-sib, no-content, no-style, no-info, no-rec, no-rec-content, no-rec-style.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Also apply the information loss to the cross-domain compressions.
    #[arg(long)]
    pub info_cross_domain: bool,
    /// Replace sampled noise by its expectation.
    #[arg(long)]
    pub expectation: bool,
    /// Checkpoint interval in steps [default: 1000].
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Preview interval in steps, 0 disables [default: 0].
    #[arg(long)]
    pub preview_every: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// Expectation-mode noise (the default).
    #[arg(long, conflicts_with = "sample")]
    pub deterministic: bool,
    /// Sample the bottleneck noise from --seed.
    #[arg(long)]
    pub sample: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    /// Checkpoint file, or a training output directory (uses its latest checkpoint).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output file name inside --out.
    #[arg(long, default_value = "stylized.png")]
    pub name: String,
    /// Replacement encoder archive.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    /// Comma-separated style images.
    #[arg(long, value_delimiter = ',', required = true)]
    pub styles: Vec<PathBuf>,
    /// Comma-separated non-negative weights summing to 1.
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep")]
    pub weights: Vec<f64>,
    /// Evenly spaced weights: K images for two styles, a KxK grid for four.
    #[arg(long)]
    pub sweep: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[command(flatten)]
    pub noise: NoiseArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// content or style.
    #[arg(long, default_value = "content")]
    pub branch: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub content_dir: PathBuf,
    #[arg(long)]
    pub style_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n_content: usize,
    #[arg(long, default_value_t = 20)]
    pub n_style: usize,
    /// Evaluation images are short-side resized and centre-cropped to this size.
    #[arg(long, default_value_t = 256)]
    pub size: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disentanglement probes to run: blackline, black.
    #[arg(long)]
    pub probe: Vec<String>,
    /// Also write per-layer MI tables for both branches.
    #[arg(long)]
    pub mi_table: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Format(_) | Error::ConfigMismatch(_) | Error::Ingestion { .. } | Error::Io { .. } | Error::Candle(_) => {
            EXIT_DATA
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Argument(_)) {
                eprintln!("run with --help for usage");
            }
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Stylize(a) => cmd_stylize(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::InspectInfo(a) => cmd_inspect(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn ablation_by_flag(name: &str) -> Result<Ablation> {
    Ok(match name {
        "full" => Ablation::Full,
        "no-cib" => Ablation::NoCib,
        "no-sib" => Ablation::NoSib,
        "no-content" => Ablation::NoContentLoss,
        "no-style" => Ablation::NoStyleLoss,
        "no-info" => Ablation::NoInfoLoss,
        "no-rec" => Ablation::NoRecLoss,
        "no-rec-content" => Ablation::NoRecContent,
        "no-rec-style" => Ablation::NoRecStyle,
        other => return Err(Error::arg(format!("unknown ablation `{other}`"))),
    })
}

/// Defaults, then the config file, then command-line flags.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_file(p).map_err(|e| match e {
            Error::Io { path, source } => Error::arg(format!("cannot read config {}: {source}", path.display())),
            other => other,
        })?;
    }
    if let Some(name) = &a.ablation {
        ablation_by_flag(name)?.apply(&mut cfg)?;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        }
    };
    set("content_dir", a.content_dir.as_ref().map(|p| p.display().to_string()))?;
    set("style_dir", a.style_dir.as_ref().map(|p| p.display().to_string()))?;
    set("steps", a.steps.map(|v| v.to_string()))?;
    if let Some(size) = a.size {
        set("crop", Some(size.to_string()))?;
        if a.resize.is_none() {
            set("resize", Some((2 * size).to_string()))?;
        }
    }
    set("resize", a.resize.map(|v| v.to_string()))?;
    set("batch", a.batch.map(|v| v.to_string()))?;
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("encoder", a.encoder.clone())?;
    set("lambda_info", a.lambda_info.map(|v| v.to_string()))?;
    set("lambda_content", a.lambda_content.map(|v| v.to_string()))?;
    set("lambda_style", a.lambda_style.map(|v| v.to_string()))?;
    set("lambda_rec", a.lambda_rec.map(|v| v.to_string()))?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    set("preview_every", a.preview_every.map(|v| v.to_string()))?;
    set("apply_info_loss_cross_domain", a.info_cross_domain.then(|| "true".into()))?;
    set("noise", a.expectation.then(|| "expectation".into()))?;
    cfg.seed = a.seed;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if cfg.content_dir.as_os_str().is_empty() {
        return Err(Error::arg("--content-dir is required"));
    }
    if cfg.style_dir.as_os_str().is_empty() {
        return Err(Error::arg("--style-dir is required"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let total = cfg.steps;
    let summary = run_training(cfg, &a.out, |step, r| {
        if step == 0 || (step + 1) % 50 == 0 || step + 1 == total {
            eprintln!(
                "step {:>6}/{total}  total {:.4}  info {:.4}  content {:.4}  style {:.4}  rec {:.4}",
                step + 1,
                r.total,
                r.info,
                r.content,
                r.style,
                r.rec
            );
        }
    })?;
    println!("{}", summary.final_checkpoint.display());
    Ok(())
}

/// Resolves a training directory to its latest checkpoint.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join("latest.json");
    let text = std::fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", latest.display())))?;
    let name = v["checkpoint"]
        .as_str()
        .ok_or_else(|| Error::format(format!("{} has no checkpoint entry", latest.display())))?;
    Ok(path.join(name))
}

fn open_model(checkpoint: &Path, encoder: Option<&Path>) -> Result<Model> {
    load_model(&resolve_checkpoint(checkpoint)?, encoder)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn with_noise<T>(args: &NoiseArgs, f: impl FnOnce(&mut Noise<'_>) -> Result<T>) -> Result<T> {
    if args.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        f(&mut Noise::Sample(&mut rng))
    } else {
        f(&mut Noise::Expectation)
    }
}

fn cmd_stylize(a: StylizeArgs) -> Result<()> {
    let model = open_model(&a.checkpoint, a.encoder.as_deref())?;
    let dtype = model.dtype();
    let content = load_image(&a.content, dtype)?;
    let style = load_image(&a.style, dtype)?;
    let out = with_noise(&a.noise, |n| model.stylize(&content, &style, n))?;
    create_out(&a.out)?;
    let path = a.out.join(&a.name);
    save_image(&out, 0, &path)?;
    println!("{}", path.display());
    Ok(())
}

/// Evenly spaced weight vectors: a row for two styles, a bilinear grid for four.
pub fn sweep_weights(n_styles: usize, k: usize) -> Result<Vec<(String, Vec<f64>)>> {
    if k < 2 {
        return Err(Error::arg("--sweep needs at least 2 steps"));
    }
    let t = |i: usize| i as f64 / (k - 1) as f64;
    match n_styles {
        2 => Ok((0..k).map(|i| (format!("sweep_{i:02}"), vec![1.0 - t(i), t(i)])).collect()),
        4 => Ok((0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .map(|(i, j)| {
                let (u, v) = (t(i), t(j));
                (
                    format!("sweep_{i:02}_{j:02}"),
                    vec![(1.0 - u) * (1.0 - v), (1.0 - u) * v, u * (1.0 - v), u * v],
                )
            })
            .collect()),
        n => Err(Error::arg(format!("--sweep needs 2 or 4 styles, got {n}"))),
    }
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    let jobs = match a.sweep {
        Some(k) => sweep_weights(a.styles.len(), k)?,
        None => {
            if a.weights.len() != a.styles.len() {
                return Err(Error::arg(format!(
                    "{} styles but {} weights",
                    a.styles.len(),
                    a.weights.len()
                )));
            }
            vec![("interpolated".to_string(), a.weights.clone())]
        }
    };
    let weights = jobs
        .iter()
        .map(|(_, w)| InterpolationWeights::new(w.clone()))
        .collect::<Result<Vec<_>>>()?;
    let model = open_model(&a.checkpoint, a.encoder.as_deref())?;
    let dtype = model.dtype();
    let content = load_image(&a.content, dtype)?;
    let styles = a
        .styles
        .iter()
        .map(|p| load_image(p, dtype))
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.out)?;
    let mut panels = Vec::with_capacity(jobs.len());
    for ((name, _), w) in jobs.iter().zip(&weights) {
        let img = with_noise(&a.noise, |n| model.interpolate(&content, &styles, w, n))?;
        let path = a.out.join(format!("{name}.png"));
        save_image(&img, 0, &path)?;
        println!("{}", path.display());
        panels.push(img);
    }
    if let Some(k) = a.sweep {
        let rows: Vec<Tensor> = panels
            .chunks(if styles.len() == 4 { k } else { panels.len() })
            .map(|row| Tensor::cat(&row.iter().map(|p| p.tensor()).collect::<Vec<_>>(), 3))
            .collect::<candle_core::Result<_>>()?;
        let sheet = ImageTensor::new(Tensor::cat(&rows, 2)?)?;
        save_image(&sheet, 0, &a.out.join(if styles.len() == 4 { "grid.png" } else { "strip.png" }))?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let kind: BranchKind = a.branch.parse()?;
    let model = open_model(&a.checkpoint, a.encoder.as_deref())?;
    let img = pad_to_multiple(&load_image(&a.image, model.dtype())?, 16)?;
    let cp = model.compress_branch(kind, &model.encode(&img)?, &mut Noise::Expectation)?;
    create_out(&a.out)?;
    for p in export_info(&cp, kind.prefix(), &a.out, 0)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let probes = a.probe.iter().map(|p| p.parse()).collect::<Result<Vec<Probe>>>()?;
    if a.size < 16 || a.size % 16 != 0 {
        return Err(Error::arg("--size must be a positive multiple of 16"));
    }
    let model = open_model(&a.checkpoint, a.encoder.as_deref())?;
    let content = scan_images(&a.content_dir)?;
    let style = scan_images(&a.style_dir)?;
    let (cs, ss) = sample_protocol(&content, &style, a.n_content, a.n_style, a.seed)?;
    let mut report = evaluate_pairs(&model, &cs, &ss, a.size, a.seed)?;
    let load_named = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, load_square(p, a.size, model.dtype())?))
            })
            .collect::<Result<Vec<_>>>()
    };
    for probe in probes {
        let inputs = match probe {
            Probe::BlacklineStyle => load_named(&cs)?,
            Probe::BlackContent => load_named(&ss)?,
        };
        report.probes.push(disentanglement_probe(&model, probe, &inputs)?);
    }
    create_out(&a.out)?;
    if a.mi_table {
        let c_imgs: Vec<ImageTensor> = load_named(&cs)?.into_iter().map(|(_, t)| t).collect();
        let s_imgs: Vec<ImageTensor> = load_named(&ss)?.into_iter().map(|(_, t)| t).collect();
        report.mi_tables = vec![
            mi_table(&model, &c_imgs, BranchKind::Content)?,
            mi_table(&model, &s_imgs, BranchKind::Style)?,
        ];
        let path = a.out.join("mi_table.csv");
        std::fs::write(&path, mi_tables_csv(&report.mi_tables)).map_err(|e| Error::io(&path, e))?;
    }
    let json = a.out.join("report.json");
    std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let csv = a.out.join("report.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    println!(
        "content_loss {:.6}  ssim {:.6}  gram_loss {:.6}  ({} pairs)",
        report.content_loss,
        report.ssim,
        report.gram_loss,
        report.per_pair_rows.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shapes() {
        let row = sweep_weights(2, 5).unwrap();
        assert_eq!(row.len(), 5);
        assert_eq!(row[0].1, vec![1.0, 0.0]);
        assert_eq!(row[4].1, vec![0.0, 1.0]);
        let grid = sweep_weights(4, 3).unwrap();
        assert_eq!(grid.len(), 9);
        for (_, w) in &grid {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(sweep_weights(3, 3).is_err());
        assert!(sweep_weights(2, 1).is_err());
    }

    #[test]
    fn help_and_unknown_flags() {
        assert_eq!(run(["infostyler", "--help"]), EXIT_OK);
        assert_eq!(run(["infostyler", "train", "--help"]), EXIT_OK);
        assert_eq!(run(["infostyler", "stylize", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["infostyler"]), EXIT_USAGE);
    }

    #[test]
    fn cli_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "steps = 7\nlr = 0.5\ncontent_dir = a\nstyle_dir = b\n").unwrap();
        let cli = Cli::try_parse_from([
            "infostyler", "train", "--config", cfg.to_str().unwrap(), "--out", "o", "--lr", "0.01", "--size", "64",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let c = train_config(&a).unwrap();
        assert_eq!((c.steps, c.lr, c.crop, c.resize), (7, 0.01, 64, 128));
    }
}
