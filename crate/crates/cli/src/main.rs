mod manifest;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tbnet::checkpoint::Checkpoint;
use tbnet::config::{AblationFlags, TrainConfig};
use tbnet::data::{self, GeneratorSpec, Split};
use tbnet::training::{self, LogRecord, TrainOptions, TrainState};

use crate::manifest::RunManifest;

/// Environment variable that relocates every relative `--out` directory.
pub const OUTPUT_ROOT_ENV: &str = "TBNET_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "tbnet", version, about = "Boundary-aware pavement defect segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pavement dataset to disk.
    Generate(GenerateArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image and write mask, boundary and overlay images.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (reads `<data>/train`, and `<data>/val` when present).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced CPU setup instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Evaluate on the validation split every this many epochs.
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Drop context-aware attention.
    #[arg(long)]
    no_attn: bool,
    /// Drop the boundary stream and its loss.
    #[arg(long)]
    no_boundary: bool,
    /// Plain cross-entropy instead of class-weighted.
    #[arg(long)]
    no_weighting: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

/// One flag per `TrainConfig` key.
#[derive(Args, Default)]
struct ConfigFlags {
    /// `HxW` or a single side length.
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    epoch_lr_decay: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_seg: Option<f64>,
    #[arg(long)]
    lambda_boundary: Option<f64>,
    /// per_pixel, per_image or none.
    #[arg(long)]
    weighting_mode: Option<String>,
    /// mean or sum.
    #[arg(long)]
    reduction: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Four comma-separated unit counts, e.g. `3,4,23,3`.
    #[arg(long)]
    backbone_blocks: Option<String>,
    #[arg(long)]
    context_depth: Option<usize>,
    /// features or map.
    #[arg(long)]
    boundary_fusion: Option<String>,
    #[arg(long)]
    max_attention_len: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_enum<T: DeserializeOwned>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .with_context(|| format!("--{key}: unknown value `{v}`"))
}

fn parse_size(v: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("--input-size: bad number `{s}`"));
    match v.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let s = parse(v)?;
            Ok((s, s))
        }
    }
}

impl ConfigFlags {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { cfg.$f = v; })*};
        }
        set!(learning_rate, decay, epoch_lr_decay, epochs, lambda_seg, lambda_boundary, seed, batch_size);
        set!(width_divisor, context_depth, max_attention_len, num_classes);
        if let Some(v) = &self.input_size {
            cfg.input_size = parse_size(v)?;
        }
        if let Some(v) = &self.weighting_mode {
            cfg.weighting_mode = parse_enum("weighting-mode", v)?;
        }
        if let Some(v) = &self.reduction {
            cfg.reduction = parse_enum("reduction", v)?;
        }
        if let Some(v) = &self.boundary_fusion {
            cfg.boundary_fusion = parse_enum("boundary-fusion", v)?;
        }
        if let Some(v) = &self.backbone_blocks {
            let n: Vec<usize> = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("--backbone-blocks: bad list `{v}`"))?;
            cfg.backbone_blocks = n
                .try_into()
                .map_err(|_| anyhow::anyhow!("--backbone-blocks needs exactly four counts"))?;
        }
        Ok(())
    }
}

fn out_dir(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_out(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("cannot create output directory {}", p.display()))
}

fn load_state(path: &Path) -> Result<TrainState> {
    let c = Checkpoint::load(path)?;
    Ok(TrainState::from_checkpoint(c)?)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let out = out_dir(&a.out);
    let spec = GeneratorSpec {
        num_samples: a.samples,
        image_size: (a.size, a.size),
        seed: a.seed,
        split: a.split.parse::<Split>()?,
        ..GeneratorSpec::default()
    };
    create_out(&out)?;
    let d = data::generate_dataset(&spec)?;
    data::save_dataset(&out, &d)?;
    let counts = d.class_pixel_counts();
    let total: u64 = counts.iter().sum();
    println!("{:>3}  {:<18} {:>12} {:>8}", "id", "class", "pixels", "share");
    for (id, name) in d.taxonomy.classes() {
        let n = counts[id as usize];
        println!("{id:>3}  {name:<18} {n:>12} {:>7.3}%", 100.0 * n as f64 / total.max(1) as f64);
    }
    println!("{} samples written to {}", d.len(), out.join(spec.split.as_str()).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let out = out_dir(&a.out);
    let resume = a.resume.as_deref().map(load_state).transpose()?;
    let (mut cfg, mut flags) = match (&a.config, &resume) {
        (Some(p), _) => (TrainConfig::load(p)?, AblationFlags::full()),
        (None, Some(s)) => (s.cfg().clone(), s.network.flags),
        (None, None) if a.desk => (TrainConfig::desk(), AblationFlags::full()),
        (None, None) => (TrainConfig::default(), AblationFlags::full()),
    };
    a.cfg.apply(&mut cfg)?;
    flags.use_caa &= !a.no_attn;
    flags.use_boundary_stream &= !a.no_boundary;
    flags.use_class_weighting &= !a.no_weighting;

    let train_set = data::load_dataset(&a.data, Split::Train)?;
    let val = if a.data.join(Split::Val.as_str()).join("images").is_dir() {
        Some(data::load_dataset(&a.data, Split::Val)?)
    } else {
        None
    };

    create_out(&out)?;
    let mut manifest = RunManifest::new("train", &cfg, &flags, &a.data)?;
    manifest.write(&out)?;
    cfg.save(&out.join("config.toml"))?;

    let run = training::train(
        &cfg,
        &train_set,
        &flags,
        TrainOptions {
            out_dir: Some(out.clone()),
            val,
            eval_every: a.eval_every,
            max_steps: a.max_steps,
            resume,
        },
    )?;
    for r in &run.log {
        match r {
            LogRecord::Step { step, epoch, seg, boundary, total, .. } if step % 10 == 0 => {
                println!("step {step:>6}  epoch {epoch:>4}  seg {seg:.5}  boundary {boundary:.5}  total {total:.5}")
            }
            LogRecord::Eval { epoch, mean_iou, .. } => {
                println!("epoch {epoch:>4}  val mIoU {}", fmt_opt(*mean_iou))
            }
            _ => {}
        }
    }
    println!("finished at step {} (epoch {}); checkpoints in {}", run.state.step, run.state.epoch, out.display());
    manifest.finish(&out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.2}%", 100.0 * x))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let out = out_dir(&a.out);
    let state = load_state(&a.checkpoint)?;
    let d = data::load_dataset(&a.data, a.split.parse()?)?;
    create_out(&out)?;
    let mut manifest = RunManifest::new("eval", state.cfg(), &state.network.flags, &a.data)?;
    manifest.write(&out)?;
    let report = training::evaluate(&state, &d)?;
    let table = report.to_text_table();
    std::fs::write(out.join("metrics.json"), report.to_json()).context("writing metrics.json")?;
    std::fs::write(out.join("metrics.txt"), &table).context("writing metrics.txt")?;
    print!("{table}");
    println!("mCPA {}  mIoU {}", fmt_opt(report.mean_cpa), fmt_opt(report.mean_iou));
    manifest.finish(&out)
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let out = out_dir(&a.out);
    let state = load_state(&a.checkpoint)?;
    let image = data::load_image(&a.image)?;
    let (labels, boundary) = training::predict(&state, &image)?;
    create_out(&out)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let files = render::write_prediction(&out, stem, &image, &labels, boundary.as_ref())?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// 3 for numeric failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<tbnet::Error>() {
        Some(tbnet::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
