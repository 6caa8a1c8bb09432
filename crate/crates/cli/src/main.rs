//! `evseg`: dataset synthesis, training, evaluation and single-stream
//! segmentation.
//!
//! Settings come from the config file, then `EVSEG_*` environment
//! variables, then flags; later sources win. An environment variable
//! `EVSEG_TRAIN__STEPS=5` is the override `train.steps=5` (`__` separates
//! sections).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evseg::eval::SegmentationMap;
use evseg::events::read_events;
use evseg::gray::save_label_png;
use evseg::train::{
    dataset_for, load_dataset, run_evaluation, run_training, synthesize, write_json, Checkpoint, EvalInputs,
    EventModel, ExperimentConfig,
};
use evseg::backbones::parse_class_file;
use evseg::{Error, Result};

const ENV_PREFIX: &str = "EVSEG_";

#[derive(Parser)]
#[command(name = "evseg", version, about = "Open-vocabulary semantic segmentation for event cameras")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy-shapes dataset on disk.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Run two-branch distillation training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint. Its embedded config replaces the defaults
        /// and training runs until `train.steps`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset directory; the toy set is generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's event branch on a labelled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction vocabulary, one class per line.
        #[arg(long)]
        classes: Option<PathBuf>,
        /// Merge map from prediction classes to dataset classes.
        #[arg(long)]
        merge: Option<PathBuf>,
        /// Report path; defaults to `<out>/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment one event stream with the event branch.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Event file, text or binary.
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        classes: PathBuf,
    },
}

fn env_overrides() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?;
            Some((key.to_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

fn flag_overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect()
}

fn apply(cfg: ExperimentConfig, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    cfg.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

/// Config file, then environment, then flags.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    resolve_from(common, None)
}

/// As `resolve`, with `fallback` replacing the defaults when no config file
/// is given.
fn resolve_from(common: &Common, fallback: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let base = match (&common.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(cfg)) => cfg,
        (None, None) => ExperimentConfig::default(),
    };
    let mut cfg = apply(apply(base, &env_overrides())?, &flag_overrides(&common.set)?)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn cmd_synthesize(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let root = common
        .out
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data/toy"));
    let m = synthesize(&cfg.dataset, cfg.seed, &root)?;
    println!(
        "wrote {} training and {} test sequences to {}",
        m.sequences,
        m.test_sequences,
        root.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, resume: Option<&Path>, data: Option<&Path>) -> Result<()> {
    // Resuming starts from the checkpoint's own config, so only the
    // supplied overrides (typically train.steps) change.
    let embedded = match resume {
        Some(p) => Some(ExperimentConfig::from_json(&Checkpoint::load(p)?.config_json)?),
        None => None,
    };
    let mut cfg = resolve_from(common, embedded)?;
    if let Some(d) = data {
        cfg.data_dir = Some(d.to_path_buf());
    }
    let dataset = dataset_for(&cfg)?;
    let out = cfg.output.dir.clone();
    let outcome = run_training(&cfg, &dataset, &out, resume)?;
    if let Some(last) = outcome.records.last() {
        println!("step {} l_final {:.6}", last.step, last.l_final);
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

struct EvalArgs<'a> {
    checkpoint: &'a Path,
    data: Option<&'a Path>,
    classes: Option<&'a Path>,
    merge: Option<&'a Path>,
    report: Option<&'a Path>,
}

fn cmd_eval(common: &Common, args: EvalArgs) -> Result<()> {
    let mut model = EventModel::load(args.checkpoint)?;
    // Only the evaluation settings of a supplied config apply; the model
    // itself is fixed by the checkpoint.
    let cfg = resolve(common)?;
    model.config.eval = cfg.eval.clone();
    let dataset = match args.data.or(model.config.data_dir.as_deref()) {
        Some(dir) => load_dataset(dir)?,
        None => dataset_for(&model.config)?,
    };
    let inputs = EvalInputs::from_files(
        args.classes.or(cfg.eval.classes_file.as_deref()),
        args.merge.or(cfg.eval.merge_file.as_deref()),
    )?;
    let report = args
        .report
        .map(Path::to_path_buf)
        .unwrap_or_else(|| common.out.clone().unwrap_or_default().join("report.json"));
    let r = run_evaluation(&model, &dataset, &inputs, &report)?;
    println!(
        "mIoU {:.4} accuracy {:.4} over {} samples ({} skipped); report {}",
        r.metrics.miou,
        r.metrics.pixel_accuracy,
        r.samples,
        r.skipped,
        report.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct SoftMap<'a> {
    width: usize,
    height: usize,
    vocabulary: &'a [String],
    /// Row-major `[H*W, C]`.
    soft: &'a [f64],
}

fn cmd_segment(common: &Common, checkpoint: &Path, events: &Path, classes: &Path) -> Result<()> {
    let vocabulary = parse_class_file(classes)?;
    let model = EventModel::load(checkpoint)?;
    let stream = read_events(events)?;
    let map: SegmentationMap = model.segment(&stream, &vocabulary)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("segment-out"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_label_png(&map.hard, map.width, map.height, &out.join("labels.png"))?;
    write_json(
        &SoftMap {
            width: map.width,
            height: map.height,
            vocabulary: &map.vocabulary,
            soft: map.soft.data(),
        },
        &out.join("soft.json"),
    )?;
    println!("wrote {} and {}", out.join("labels.png").display(), out.join("soft.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synthesize { common } => cmd_synthesize(common),
        Command::Train { common, resume, data } => cmd_train(common, resume.as_deref(), data.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
            classes,
            merge,
            report,
        } => cmd_eval(
            common,
            EvalArgs {
                checkpoint,
                data: data.as_deref(),
                classes: classes.as_deref(),
                merge: merge.as_deref(),
                report: report.as_deref(),
            },
        ),
        Command::Segment {
            common,
            checkpoint,
            events,
            classes,
        } => cmd_segment(common, checkpoint, events, classes),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
