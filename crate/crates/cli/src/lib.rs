//! `icm` command-line driver.

pub mod ablate;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use icm_core::fsutil::write_atomic;
use icm_core::metrics::{
    evaluate, evaluate_files, write_ground_truth, write_predictions, GroundTruthFile, MetricsReport, PredictionFile,
};
use icm_core::synthgen::{generate_dataset, load_dataset, Mode, VideoSample};
use icm_core::trainer::{
    finish_training, gradcheck_suite, load_checkpoint, predict_triples, save_checkpoint, scene_tuned_model, Ablation,
    ModelState, PredictionTriple, StageFlags, TrainOutcome, TrainingData,
};

pub use ablate::{run_ablation, AblationRow, AblationTable};
pub use config::{Overrides, RunConfig, RESOLVED_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "icm", version, about = "Omni-scene visual sentiment identification, localization and attribution")]
pub struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "ICM_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "ICM_MODE")]
    pub mode: Option<Mode>,
    #[arg(long, global = true, env = "ICM_ABLATION")]
    pub ablation: Option<Ablation>,
    /// Root for default output directories.
    #[arg(long, global = true, env = "ICM_OUT_ROOT")]
    pub out_root: Option<PathBuf>,
    /// Output directory of this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Unscaled attention and learning rate 2e-5.
    #[arg(long, global = true)]
    pub literal_paper: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Scene tuning, dictionary build and omni tuning on a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write prediction and ground-truth interval files for a split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a predictions file against ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Train and score every ablation over several seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long)]
        configurations: Option<usize>,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.resolve(&Overrides {
            seed: self.seed,
            mode: self.mode,
            ablation: self.ablation,
            out_root: self.out_root.clone(),
            literal_paper: self.literal_paper,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

fn write_ndjson<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| cfg.default_data_dir(), Path::to_path_buf);
    create_dir(&dir)?;
    let manifest = generate_dataset(&cfg.generator, &dir)?;
    cfg.write_into(&dir)?;
    println!(
        "wrote {} dataset ({} classes) to {}",
        cfg.generator.mode.name(),
        manifest.class_names.len(),
        dir.display()
    );
    Ok(dir)
}

/// Runs both stages, checkpointing after each. Returns the run directory.
pub fn cmd_train(cfg: &RunConfig, data: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
    let data_dir = data.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let ds = load_dataset(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let dir = out.map_or_else(
        || cfg.out_root.join(format!("train-{}-s{}", cfg.train.ablation.name(), cfg.train.seed)),
        Path::to_path_buf,
    );
    create_dir(&dir)?;
    cfg.write_into(&dir)?;
    let td = TrainingData::from_dataset(&ds);
    let (model, mut log) = scene_tuned_model(&cfg.model, &td, &cfg.train)?;
    if model.stages.scene_tuned {
        save_checkpoint(&model, &dir.join("stage1.ckpt.json"))?;
    } else {
        println!("scene tuning skipped ({})", cfg.train.ablation.name());
    }
    let (model, s2) = finish_training(model, &td, &cfg.train)?;
    log.steps.extend(s2.steps);
    log.epochs.extend(s2.epochs);
    save_checkpoint(&model, &dir.join("checkpoint.json"))?;
    if let Some(d) = &model.dictionary {
        write_json(&dir.join("dictionary.json"), d)?;
    }
    write_training_log(&dir, &log, &model.stages)?;
    if ds.test.is_empty() {
        println!("trained {} (seed {}): no test split to evaluate", cfg.train.ablation.name(), cfg.train.seed);
        return Ok(dir);
    }
    let summary = icm_core::trainer::evaluate(&model, &ds.test)?;
    write_json(&dir.join("eval.json"), &summary)?;
    println!(
        "trained {} (seed {}): test segment accuracy {:.4}, mean gate entropy {:.4}",
        cfg.train.ablation.name(),
        cfg.train.seed,
        summary.accuracy,
        summary.mean_gate_entropy
    );
    Ok(dir)
}

fn write_training_log(dir: &Path, log: &TrainOutcome, stages: &StageFlags) -> Result<()> {
    write_ndjson(&dir.join("train_log.ndjson"), &log.steps)?;
    write_json(
        &dir.join("epochs.json"),
        &serde_json::json!({ "stages": stages, "epochs": log.epochs }),
    )
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, split: &str, out: Option<&Path>) -> Result<PathBuf> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data_dir = data.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let ds = load_dataset(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let videos = ds.split(split)?;
    let mode = ds.config().mode;
    let ss = ds.config().segment_seconds;
    let dir = out.map_or_else(
        || checkpoint.parent().unwrap_or(Path::new(".")).join(format!("predictions-{split}")),
        Path::to_path_buf,
    );
    create_dir(&dir)?;
    cfg.write_into(&dir)?;
    let (preds, gt) = interval_files(&model, mode, ss, videos)?;
    write_predictions(&dir.join("predictions.ndjson"), &preds)?;
    write_ground_truth(&dir.join("ground_truth.ndjson"), &gt)?;
    println!("wrote {} intervals for {} videos to {}", preds.records.len(), videos.len(), dir.display());
    Ok(dir)
}

pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, ground_truth: &Path, out: Option<&Path>) -> Result<String> {
    let report = evaluate_files(predictions, ground_truth)?;
    let text = report.to_json()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        cfg.write_into(dir)?;
        write_atomic(&dir.join("report.json"), text.as_bytes())?;
    }
    Ok(text)
}

pub fn cmd_ablate(cfg: &RunConfig, data: Option<&Path>, seeds: Option<u64>, out: Option<&Path>) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(n) = seeds {
        if n == 0 {
            bail!("--seeds must be >= 1");
        }
        cfg.ablate.seeds = n;
    }
    let data_dir = data.map_or_else(|| cfg.data_dir(), Path::to_path_buf);
    let ds = load_dataset(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let dir = out.map_or_else(|| cfg.out_root.join(format!("ablate-s{}", cfg.train.seed)), Path::to_path_buf);
    create_dir(&dir)?;
    cfg.write_into(&dir)?;
    let table = run_ablation(&cfg, &ds, |row| {
        println!("seed {} {:<16} acc {:.4}  map_avg {:.4}", row.seed, row.ablation.name(), row.report.acc, row.report.map_avg);
    })?;
    write_json(&dir.join("ablation.json"), &table)?;
    write_atomic(&dir.join("ablation.md"), table.markdown().as_bytes())?;
    print!("{}", table.markdown());
    Ok(dir)
}

/// Returns whether every group passed.
pub fn cmd_gradcheck(cfg: &RunConfig, configurations: Option<usize>, sign_flip: Option<&str>, out: Option<&Path>) -> Result<bool> {
    let mut gc = cfg.gradcheck.clone();
    if let Some(n) = configurations {
        gc.configurations = n;
    }
    let report = gradcheck_suite(&gc, sign_flip)?;
    for (name, err) in &report.groups {
        let verdict = if *err < report.tolerance { "ok" } else { "FAIL" };
        println!("{verdict:<4} {err:.3e}  {name}");
    }
    println!(
        "{} configurations, {} parameter groups, max relative error {:.3e} (tolerance {:.0e}): {}",
        report.configurations.len(),
        report.groups.len(),
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        cfg.write_into(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(report.passed)
}

/// Parses arguments and runs one command; the result is the exit code.
pub fn run<I, T>(args: I) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let cfg = cli.run_config()?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Gen => {
            cmd_gen(&cfg, out)?;
        }
        Command::Train { data } => {
            cmd_train(&cfg, data.as_deref(), out)?;
        }
        Command::Predict { checkpoint, data, split } => {
            cmd_predict(&cfg, checkpoint, data.as_deref(), split, out)?;
        }
        Command::Eval { predictions, ground_truth } => {
            print!("{}", cmd_eval(&cfg, predictions, ground_truth, out)?);
        }
        Command::Ablate { data, seeds } => {
            cmd_ablate(&cfg, data.as_deref(), *seeds, out)?;
        }
        Command::Gradcheck {
            configurations,
            inject_sign_flip,
        } => {
            if !cmd_gradcheck(&cfg, *configurations, inject_sign_flip.as_deref(), out)? {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Prediction and ground-truth interval files for a set of videos.
pub fn interval_files(model: &ModelState, mode: Mode, ss: f64, videos: &[VideoSample]) -> Result<(PredictionFile, GroundTruthFile)> {
    let triples: Vec<Vec<PredictionTriple>> = videos.iter().map(|v| predict_triples(model, v, ss)).collect::<Result<_, _>>()?;
    let preds = PredictionFile::from_triples(mode, videos.iter().zip(&triples).map(|(v, t)| (v.video_id.as_str(), t.as_slice())));
    Ok((preds, GroundTruthFile::from_videos(mode, ss, videos)))
}

/// In-process equivalent of `predict` followed by `eval`.
pub fn score_videos(model: &ModelState, mode: Mode, ss: f64, videos: &[VideoSample]) -> Result<MetricsReport> {
    let (preds, gt) = interval_files(model, mode, ss, videos)?;
    Ok(evaluate(&preds, &gt)?)
}
