//! Command-line front end: `gen-data`, `train`, `eval`, `tta` and `report`.
//!
//! Exit codes: 0 success, 1 bad input (config, files, arguments, generation),
//! 2 internal failure. Every command that writes an output directory appends a
//! record to `run_manifest.json` there.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{self, MetricsTable};
use crate::model::SavosModel;
use crate::report::{self, EvalInfo, TraceRow, TtaSummaryRow};
use crate::synthgen::{self, io as sio, ShapeKind, VideoSample};
use crate::trainer::{self, Trainer, CHECKPOINT_FILE};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "savos-lab",
    version,
    about = "Synthetic amodal video segmentation lab"
)]
pub struct Cli {
    /// TOML run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command's stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video dataset.
    GenData(GenArgs),
    /// Train the amodal model on a generated dataset.
    Train(TrainArgs),
    /// Score the model or the convex baseline on a dataset.
    Eval(EvalArgs),
    /// Test-time adaptation on each video of a dataset (or one video directory).
    Tta(TtaArgs),
    /// Plots and comparison tables from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum)]
    pub shape: Option<ShapeArg>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShapeArg {
    Gum,
    Star,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Model,
    Convex,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Required for `--baseline model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub baseline: Baseline,
    /// Keep object-frames whose occlusion rate lies in `lo:hi` (inclusive).
    #[arg(long, value_parser = parse_range)]
    pub filter_occ: Option<(f64, f64)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stop_delta: Option<f64>,
    #[arg(long)]
    pub stop_window: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Adapt only the first N videos.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding train logs, TTA traces or metrics.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = a
        .trim()
        .parse()
        .map_err(|e| format!("bad lower bound {a:?}: {e}"))?;
    let hi: f64 = b
        .trim()
        .parse()
        .map_err(|e| format!("bad upper bound {b:?}: {e}"))?;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(format!("{s:?} is not a range inside [0, 1]"));
    }
    Ok((lo, hi))
}

/// One invocation, as appended to `run_manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config_snapshot: RunConfig,
    pub code_version: String,
    pub seed: u64,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn append(dir: &Path, record: RunRecord) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut m = Self::load(&path)?;
        m.runs.push(record);
        let text = serde_json::to_string_pretty(&m)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Generation { .. }
        | Error::Contract(_) => 1,
        Error::NonFinite { .. } | Error::Tensor(_) | Error::Json(_) => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let printable: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, &printable) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    let started_at = now();
    let mut cfg = load_config(cli)?;
    let (name, out, seed) = match &cli.command {
        Command::GenData(a) => (
            "gen-data",
            Some(gen_data(cli, &mut cfg, a)?),
            cfg.generator.seed,
        ),
        Command::Train(a) => ("train", Some(train(cli, &mut cfg, a)?), cfg.train.seed),
        Command::Eval(a) => ("eval", eval(a)?, 0),
        Command::Tta(a) => ("tta", Some(tta(&mut cfg, a)?), 0),
        Command::Report(a) => {
            let files = report::build_report(&a.runs, &a.out)?;
            for f in files {
                println!("{}", f.display());
            }
            ("report", None, 0)
        }
    };
    if let Some(dir) = out {
        RunManifest::append(
            &dir,
            RunRecord {
                command: name.to_string(),
                args: args.to_vec(),
                config_snapshot: cfg,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                started_at,
                finished_at: now(),
            },
        )?;
    }
    Ok(())
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

fn gen_data(cli: &Cli, cfg: &mut RunConfig, a: &GenArgs) -> Result<PathBuf> {
    if a.count == 0 {
        return Err(Error::Config("--count 0: nothing to generate".into()));
    }
    if let Some(s) = cli.seed {
        cfg.generator.seed = s;
    }
    if let Some(shape) = a.shape {
        cfg.generator.shape = match shape {
            ShapeArg::Gum => ShapeKind::Gum,
            ShapeArg::Star => ShapeKind::Star,
        };
    }
    cfg.generator.validate()?;
    if a.out.exists() {
        if !a.out.is_dir() {
            return Err(Error::Config(format!(
                "{} exists and is not a directory",
                a.out.display()
            )));
        }
        if is_nonempty_dir(&a.out) {
            if !a.force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to replace it",
                    a.out.display()
                )));
            }
            fs::remove_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        }
    }
    let result = synthgen::generate_dataset(&cfg.generator, cfg.generator.seed, a.count)
        .and_then(|videos| sio::write_dataset(&videos, cfg.generator.seed, &cfg.generator, &a.out));
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&a.out);
        return Err(e);
    }
    println!("wrote {} videos to {}", a.count, a.out.display());
    Ok(a.out.clone())
}

fn train(cli: &Cli, cfg: &mut RunConfig, a: &TrainArgs) -> Result<PathBuf> {
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    cfg.validate()?;
    let videos = sio::read_dataset(&a.data)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let device = Device::Cpu;
    let mut trainer = if a.resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.model_config != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model configuration",
                ckpt_path.display()
            )));
        }
        Trainer::resume(&ck, cfg.train.clone(), &device)?
    } else {
        if ckpt_path.exists() {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; pass --resume to continue it",
                a.out.display()
            )));
        }
        Trainer::new(
            SavosModel::new(cfg.model.clone(), &device, DType::F32)?,
            cfg.train.clone(),
        )?
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let snapshot = a.out.join(CONFIG_SNAPSHOT_FILE);
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
    let sequences = trainer::dataset_sequences(&videos, cfg.model.patch_size)?;
    log::info!(
        "training on {} object sequences from {} videos, steps {}..{}",
        sequences.len(),
        videos.len(),
        trainer.step(),
        cfg.train.max_steps
    );
    let rows = trainer.fit(&sequences, Some(&a.out))?;
    if let Some(last) = rows.last() {
        println!(
            "step {} total {:.5} l_m {:.5} l_c {:.5}",
            last.step, last.total, last.l_m, last.l_c
        );
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(a.out.clone())
}

fn load_model(path: &Path) -> Result<SavosModel> {
    Checkpoint::load(path)?.build_model(&Device::Cpu, DType::F32)
}

fn eval(a: &EvalArgs) -> Result<Option<PathBuf>> {
    let videos = sio::read_dataset(&a.data)?;
    let predictions = match a.baseline {
        Baseline::Convex => evalkit::convex_predictions(&videos),
        Baseline::Model => {
            let ck = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("--baseline model needs --checkpoint".into()))?;
            trainer::predict_dataset(&load_model(ck)?, &videos)?
        }
    };
    let table = evalkit::evaluate(&predictions, &videos, a.filter_occ)?;
    print!("{}", table.to_text_table());
    let Some(out) = &a.out else {
        println!("{}", table.to_json()?);
        return Ok(None);
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_metrics(out, &table)?;
    let info = EvalInfo {
        method: match a.baseline {
            Baseline::Convex => "convex".into(),
            Baseline::Model => "savos".into(),
        },
        data: a.data.display().to_string(),
        checkpoint: a.checkpoint.as_ref().map(|p| p.display().to_string()),
        filter: a.filter_occ,
    };
    let info_path = out.join(report::EVAL_INFO_FILE);
    fs::write(&info_path, serde_json::to_string_pretty(&info)?)
        .map_err(|e| Error::io(&info_path, e))?;
    Ok(Some(out.clone()))
}

fn write_metrics(dir: &Path, table: &MetricsTable) -> Result<()> {
    let files = [
        (report::METRICS_FILE, table.to_json()?),
        ("metrics.txt", table.to_text_table()),
        ("buckets.csv", table.to_bucket_csv()),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// A dataset directory, or a single video directory.
fn read_videos(path: &Path) -> Result<Vec<(String, VideoSample)>> {
    if path.join("manifest.json").exists() && !path.join("dataset.json").exists() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".into());
        return Ok(vec![(name, sio::read_video(path)?)]);
    }
    sio::read_dataset_manifest(path)?;
    sio::video_dirs(path)?
        .into_iter()
        .map(|d| {
            let name = d
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, sio::read_video(&d)?))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn tta(cfg: &mut RunConfig, a: &TtaArgs) -> Result<PathBuf> {
    if let Some(d) = a.stop_delta {
        cfg.tta.stop_delta = d;
    }
    if let Some(w) = a.stop_window {
        cfg.tta.stop_window = w;
    }
    if let Some(n) = a.max_iters {
        cfg.tta.max_iters = n;
    }
    cfg.tta.validate()?;
    let model = load_model(&a.checkpoint)?;
    let mut videos = read_videos(&a.data)?;
    if let Some(n) = a.limit {
        videos.truncate(n);
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let mut trace_rows = Vec::new();
    let mut summary = Vec::new();
    let mut before_all = Vec::new();
    let mut after_all = Vec::new();
    let mut samples = Vec::new();
    for (name, sample) in videos {
        let one = std::slice::from_ref(&sample);
        let mut observed: Vec<(usize, f64, f64)> = Vec::new();
        let mut scoring_error = None;
        let outcome = trainer::test_time_adapt_observed(&model, &sample, &cfg.tta, |i, preds| {
            match evalkit::evaluate(&[preds.to_vec()], one, None) {
                Ok(t) => observed.push((i, t.occluded_miou, t.full_miou)),
                Err(e) => scoring_error = Some(e),
            }
        })?;
        if let Some(e) = scoring_error {
            return Err(e);
        }
        for (i, occ, full) in observed {
            trace_rows.push(TraceRow {
                video: name.clone(),
                iteration: i,
                visible_iou: outcome.visible_iou.get(i).copied().unwrap_or(f64::NAN),
                occluded_miou: occ,
                full_miou: full,
            });
        }
        let before = evalkit::evaluate(std::slice::from_ref(&outcome.before), one, None)?;
        let after = evalkit::evaluate(std::slice::from_ref(&outcome.after), one, None)?;
        let stop_reason = match (&outcome.warning, outcome.stopped_early) {
            (Some(_), _) => "non-finite",
            (None, true) => "plateau",
            (None, false) => "max-iters",
        };
        if let Some(w) = &outcome.warning {
            eprintln!("warning: {name}: {w}; kept the unadapted predictions");
        }
        println!(
            "{name}: {} iterations ({stop_reason}), occluded {:.4} -> {:.4}, full {:.4} -> {:.4}",
            outcome.iterations,
            before.occluded_miou,
            after.occluded_miou,
            before.full_miou,
            after.full_miou
        );
        summary.push(TtaSummaryRow {
            video: name,
            iterations: outcome.iterations,
            stop_reason: stop_reason.into(),
            before_full: before.full_miou,
            before_occluded: before.occluded_miou,
            after_full: after.full_miou,
            after_occluded: after.occluded_miou,
        });
        before_all.push(outcome.before);
        after_all.push(outcome.after);
        samples.push(sample);
    }
    let median_before = median(summary.iter().map(|r| r.before_occluded).collect());
    let median_after = median(summary.iter().map(|r| r.after_occluded).collect());
    println!("median occluded mIoU before {median_before:.4} after {median_after:.4}");

    report::write_csv(&a.out.join(report::TTA_TRACE_FILE), &trace_rows)?;
    report::write_csv(&a.out.join(report::TTA_SUMMARY_FILE), &summary)?;
    let before = evalkit::evaluate(&before_all, &samples, None)?;
    let after = evalkit::evaluate(&after_all, &samples, None)?;
    for (file, table) in [("before.json", &before), ("after.json", &after)] {
        let p = a.out.join(file);
        fs::write(&p, table.to_json()?).map_err(|e| Error::io(&p, e))?;
    }
    write_metrics(&a.out, &after)?;
    let info = EvalInfo {
        method: "savos+tta".into(),
        data: a.data.display().to_string(),
        checkpoint: Some(a.checkpoint.display().to_string()),
        filter: None,
    };
    let info_path = a.out.join(report::EVAL_INFO_FILE);
    fs::write(&info_path, serde_json::to_string_pretty(&info)?)
        .map_err(|e| Error::io(&info_path, e))?;
    Ok(a.out.clone())
}
