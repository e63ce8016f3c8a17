//! The `sen` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::adapters::contrastive_predict_batch;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{SenConfig, TaskKind};
use crate::error::{Error, Result};
use crate::experiments::{arms, gradcheck_configs, gradcheck_network, run_arm, Axis};
use crate::metrics::{MetricRecord, MetricsWriter};
use crate::network::Sen;
use crate::tasks::build_task;
use crate::trainer::Trainer;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sen", version, about = "Recursive association over frozen encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for metrics and artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write metrics.jsonl plus a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from --ckpt, appending to the metrics stream.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total updates and checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate a checkpoint, a fresh model, or the zero-shot head.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check all 20 fusion, distribution and prompt variants.
        #[arg(long)]
        sweep: bool,
    },
    /// Train every arm of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Seeds per arm, starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print frozen and trainable parameter counts.
    Params {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn config(&self) -> Result<SenConfig> {
        let mut cfg = match &self.config {
            Some(p) => SenConfig::load(p)?,
            None => SenConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(&self.out)
    }

    fn ckpt_path(&self) -> Result<PathBuf> {
        Ok(match &self.ckpt {
            Some(p) => p.clone(),
            None => self.out_dir()?.join("checkpoint.senc"),
        })
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status. Output goes to `out`, errors to `err`.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train {
            common,
            resume,
            stop_at,
        } => train(&common, resume, stop_at, out),
        Command::Eval { common } => eval(&common, out),
        Command::Gradcheck { common, sweep } => gradcheck(&common, sweep, out),
        Command::Ablate { common, axis, seeds } => ablate(&common, axis.parse()?, seeds, out),
        Command::Params { common } => params(&common, out),
    }
}

fn train(common: &Common, resume: bool, stop_at: Option<usize>, out: &mut dyn Write) -> Result<i32> {
    let dir = common.out_dir()?;
    let metrics_path = dir.join("metrics.jsonl");
    let ckpt = common.ckpt_path()?;
    let (mut trainer, mut writer) = if resume {
        let trainer = load_checkpoint(&ckpt)?;
        if let Some(seed) = common.seed {
            if seed != trainer.config().seed {
                return Err(Error::invalid("train", "--seed differs from the checkpoint's seed"));
            }
        }
        (trainer, MetricsWriter::append(&metrics_path)?)
    } else {
        (Trainer::new(&common.config()?)?, MetricsWriter::create(&metrics_path)?)
    };
    let until = stop_at.unwrap_or(trainer.config().training.steps);
    let eval = trainer.run(until, &mut |r| writer.write(r))?;
    save_checkpoint(&ckpt, &trainer)?;
    let summary = json!({
        "step": trainer.step(),
        "test_accuracy": eval.map(|e| e.accuracy),
        "test_loss": eval.map(|e| e.loss),
        "checkpoint": ckpt.display().to_string(),
        "metrics": metrics_path.display().to_string(),
    });
    writeln!(out, "{summary}").map_err(io_err)?;
    Ok(0)
}

fn eval(common: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg = match &common.ckpt {
        Some(_) if common.config.is_none() => None,
        _ => Some(common.config()?),
    };
    if let Some(cfg) = cfg.as_ref().filter(|c| c.task.kind == TaskKind::Contrastive) {
        let task = build_task(cfg)?;
        let classes = task.classes.as_ref().expect("contrastive classes");
        let preds = contrastive_predict_batch(&task.test.inputs[0], &task.test.inputs[1], classes)?;
        let correct = preds.iter().zip(&task.test.labels).filter(|(p, l)| p == l).count();
        let accuracy = correct as f64 / preds.len() as f64;
        write_eval(common, cfg, "zero-shot", 0, "test_accuracy", accuracy, out)?;
        return Ok(0);
    }
    let trainer = match (&common.ckpt, cfg) {
        (Some(p), None) => load_checkpoint(p)?,
        (_, Some(cfg)) => Trainer::new(&cfg)?,
        (None, None) => unreachable!("config is loaded when no checkpoint is given"),
    };
    let e = trainer.evaluate()?;
    let cfg = trainer.config().clone();
    write_eval(common, &cfg, cfg.variant.as_str(), trainer.step(), "test_accuracy", e.accuracy, out)?;
    write_eval(common, &cfg, cfg.variant.as_str(), trainer.step(), "test_loss", e.loss, out)?;
    Ok(0)
}

fn write_eval(
    common: &Common,
    cfg: &SenConfig,
    arm: &str,
    step: usize,
    metric: &str,
    value: f64,
    out: &mut dyn Write,
) -> Result<()> {
    let record = MetricRecord {
        step,
        arm: arm.to_string(),
        metric: metric.to_string(),
        value,
        seed: cfg.seed,
    };
    writeln!(out, "{}", serde_json::to_string(&record)?).map_err(io_err)?;
    MetricsWriter::append(&common.out_dir()?.join("eval.jsonl"))?.write(&record)
}

fn gradcheck(common: &Common, sweep: bool, out: &mut dyn Write) -> Result<i32> {
    let seed = common.seed.unwrap_or(0);
    let configs = if sweep {
        gradcheck_configs()
    } else {
        let cfg = common.config()?;
        vec![(cfg.variant.as_str().to_string(), cfg)]
    };
    let mut worst: f64 = 0.0;
    for (name, cfg) in configs {
        let report = gradcheck_network(&cfg, seed)?;
        worst = worst.max(report.max_rel_err);
        let line = json!({
            "config": name,
            "max_rel_err": report.max_rel_err,
            "checked": report.checked,
            "trainable": report.trainable,
            "pass": report.passes(GRADCHECK_TOL),
        });
        writeln!(out, "{line}").map_err(io_err)?;
    }
    writeln!(out, "max_rel_err {worst:e}").map_err(io_err)?;
    Ok(if worst < GRADCHECK_TOL { 0 } else { 1 })
}

fn ablate(common: &Common, axis: Axis, seeds: u64, out: &mut dyn Write) -> Result<i32> {
    if seeds == 0 {
        return Err(Error::invalid("ablate", "--seeds must be ≥ 1"));
    }
    let base = common.config()?;
    let dir = common.out_dir()?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let mut summary = MetricsWriter::create(&dir.join("summary.jsonl"))?;
    for (arm, cfg) in arms(axis, &base) {
        let mut total = 0.0;
        for s in 0..seeds {
            let mut c = cfg.clone();
            c.seed = base.seed + s;
            let result = run_arm(&arm, &c)?;
            for r in &result.records {
                metrics.write(r)?;
            }
            total += result.accuracy;
        }
        let row = MetricRecord {
            step: cfg.training.steps,
            arm,
            metric: "test_accuracy".into(),
            value: total / seeds as f64,
            seed: base.seed,
        };
        summary.write(&row)?;
        writeln!(out, "{}", serde_json::to_string(&row)?).map_err(io_err)?;
    }
    Ok(0)
}

fn params(common: &Common, out: &mut dyn Write) -> Result<i32> {
    let cfg = common.config()?;
    let sen = Sen::new(&cfg)?;
    let (frozen, trainable) = sen.count_parameters();
    writeln!(out, "frozen {frozen}").map_err(io_err)?;
    writeln!(out, "trainable {trainable}").map_err(io_err)?;
    writeln!(out, "total {}", frozen + trainable).map_err(io_err)?;
    Ok(0)
}
