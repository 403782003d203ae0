//! Command-line front end: `gen-data`, `train`, `eval`, `ablate` and
//! `export-features`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, AblationConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, export_query_features, EvalOptions};
use crate::synthetic::{build_benchmark, load_benchmark, Dataset, FogPreset, SceneSpec};
use crate::train::{train, Checkpoint, TrainConfig, TrainData};

#[derive(Debug, Parser)]
#[command(name = "datr", version, about = "Domain-adaptive detection transformer on a synthetic fog benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the four benchmark splits (source/target x train/val).
    GenData(GenDataArgs),
    /// Burn-in then mutual-learning training.
    Train(TrainArgs),
    /// mAP of a checkpoint on one split.
    Eval(EvalArgs),
    /// Component ablation plus pseudo-label threshold sweep.
    Ablate(AblateArgs),
    /// Dump object-query embeddings as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FogPreset::Heavy)]
    fog_preset: FogPreset,
    /// Scene generator settings as JSON; defaults otherwise.
    #[arg(long)]
    scene: Option<PathBuf>,
}

/// Options shared by `train` and `ablate` that override the config file.
#[derive(Debug, Args)]
struct TrainOverrides {
    /// Training configuration as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    burn_in_epochs: Option<usize>,
    #[arg(long)]
    mutual_epochs: Option<usize>,
    #[arg(long)]
    pseudo_threshold: Option<f64>,
    /// Use at most this many images per training split.
    #[arg(long)]
    max_train_images: Option<usize>,
    /// Evaluate on at most this many validation images.
    #[arg(long)]
    max_eval_images: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.burn_in_epochs {
            cfg.burn_in_epochs = v;
        }
        if let Some(v) = self.mutual_epochs {
            cfg.mutual_epochs = v;
        }
        if let Some(v) = self.pseudo_threshold {
            cfg.pseudo_threshold = v;
        }
        if self.max_train_images.is_some() {
            cfg.max_train_images = self.max_train_images;
        }
        if self.max_eval_images.is_some() {
            cfg.max_eval_images = self.max_eval_images;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Benchmark directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::TargetVal)]
    split: Split,
    /// Score the student weights even when the checkpoint holds a teacher.
    #[arg(long)]
    student: bool,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated pseudo-label thresholds; empty to skip the sweep.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Images taken from each of source-val and target-val.
    #[arg(long, default_value_t = 50)]
    max_images: usize,
    #[arg(long)]
    student: bool,
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn split_dataset(data: &Path, split: Split) -> Result<Dataset> {
    let bench = load_benchmark(data)?;
    let manifest = match split {
        Split::SourceTrain => &bench.source_train,
        Split::SourceVal => &bench.source_val,
        Split::TargetTrain => &bench.target_train,
        Split::TargetVal => &bench.target_val,
    };
    Dataset::load(manifest)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let spec = match &a.scene {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::json(p, e))?
                }
                None => SceneSpec::default(),
            };
            let bench = build_benchmark(&spec, &a.fog_preset.params(), a.n_train, a.n_val, a.seed, &a.out)?;
            println!(
                "wrote {} + {} training and {} + {} validation images to {}",
                bench.source_train.len(),
                bench.target_train.len(),
                bench.source_val.len(),
                bench.target_val.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.overrides.apply(load_train_config(a.overrides.config.as_deref())?)?;
            let data = TrainData::load(&load_benchmark(&a.data)?, &cfg)?;
            let summary = train(&cfg, &data, &a.out, a.resume.as_deref())?;
            println!(
                "final target mAP {:.4}; checkpoint {}",
                summary.final_map,
                summary.checkpoint.display()
            );
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::read(&a.checkpoint)?;
            let (model, which) = ckpt.load_model(!a.student)?;
            let data = a.data.as_deref().ok_or_else(|| Error::InvalidInput("eval needs --data".into()))?;
            let dataset = split_dataset(data, a.split)?;
            let opts = EvalOptions {
                iou_threshold: a.iou_threshold,
                ..Default::default()
            };
            let mut report = evaluate_map(&model.detector, &dataset, &opts)?;
            report.checkpoint = Some(format!("{} ({which})", a.checkpoint.display()));
            let json = report.to_json();
            if let Some(out) = &a.out {
                fs::write(out, &json).map_err(|e| Error::io(out, e))?;
            }
            println!("{json}");
        }
        Command::Ablate(a) => {
            let train_cfg = a.overrides.apply(load_train_config(a.overrides.config.as_deref())?)?;
            let mut cfg = AblationConfig {
                train: train_cfg,
                ..Default::default()
            };
            if let Some(t) = a.thresholds {
                cfg.thresholds = t;
            }
            let data = TrainData::load(&load_benchmark(&a.data)?, &cfg.train)?;
            let report = run_ablation(&cfg, &data, &a.out)?;
            print!("{}", report.summary());
        }
        Command::ExportFeatures(a) => {
            let ckpt = Checkpoint::read(&a.checkpoint)?;
            let (model, _) = ckpt.load_model(!a.student)?;
            let bench = load_benchmark(&a.data)?;
            let src = Dataset::load(&bench.source_val)?;
            let tgt = Dataset::load(&bench.target_val)?;
            let rows = export_query_features(&model.detector, &[&src, &tgt], &a.out, a.max_images)?;
            println!("wrote {rows} rows to {}", a.out.display());
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command. Returns
/// the process exit code: 0 on success, 2 on usage errors, 1 on any other
/// failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
