//! Command-line driver.
//!
//! ```text
//! fedprint [--profile desk|full] [--config FILE] generate   --out DIR
//! fedprint ...                                  train      --data DIR --out DIR
//! fedprint ...                                  adapt-eval --data DIR --checkpoint FILE --out DIR
//! fedprint ...                                  report     --out DIR RESULTS...
//! ```
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};

use crate::config::{ExperimentConfig, Precision, Profile};
use crate::error::{Error, Result};
use crate::eval::{read_results, write_report};
use crate::fed::write_round_logs;
use crate::models::checkpoint;
use crate::nn::Real;
use crate::pipeline;

pub const CHECKPOINT: &str = "model.ckpt";
pub const ROUND_LOG: &str = "rounds.csv";

#[derive(Debug, Parser)]
#[command(name = "fedprint", about = "Federated RF fingerprinting experiments")]
pub struct Cli {
    /// Base profile the config file is applied on top of.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// `key = value` overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `model.family` (proposed, mlp, cnn, resnet).
    #[arg(long)]
    pub model: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize both recording days and write IQ files plus a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated training on the source day.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot and adapted evaluation on the target day for each rho.
    AdaptEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated adaptation counts; overrides `adapt.rhos`.
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<usize>>,
    },
    /// Merge results files into one report.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

impl Cli {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let profile: Profile = self.profile.parse()?;
        let mut cfg = ExperimentConfig::load_file(profile, self.config.as_deref())?;
        if let Some(m) = &self.model {
            cfg.set("model.family", m)?;
        }
        if let Command::AdaptEval { rhos: Some(r), .. } = &self.command {
            cfg.rhos = r.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train_as<T: Real>(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let streams = pipeline::load_streams(data)?;
    let prep = pipeline::prepare(cfg, &streams)?;
    let (w, logs) = pipeline::train_global::<T>(cfg, &prep)?;
    mkdir(out)?;
    checkpoint::write(&out.join(CHECKPOINT), &w, &pipeline::checkpoint_metadata(cfg))?;
    write_round_logs(&out.join(ROUND_LOG), &logs)?;
    pipeline::write_resolved(cfg, out)?;
    info!("trained {} ({} params), checksum {}", w.arch.id(), w.param_count(), w.checksum());
    Ok(())
}

fn adapt_eval_as<T: Real>(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let w = checkpoint::read(ckpt)?.params.cast::<T>();
    let expected = cfg.arch()?;
    if w.arch != expected {
        return Err(Error::DescriptorMismatch(format!(
            "checkpoint holds {}, config describes {}",
            w.arch.descriptor(),
            expected.descriptor()
        )));
    }
    let streams = pipeline::load_streams(data)?;
    let prep = pipeline::prepare(cfg, &streams)?;
    let results = pipeline::adapt_and_evaluate(cfg, &w, &prep)?;
    write_report(&results, out)?;
    pipeline::write_resolved(cfg, out)?;
    print!("{}", crate::eval::summary_table(&results));
    Ok(())
}

pub fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    match &cli.command {
        Command::Generate { out } => pipeline::generate(cfg, out).map(|_| ()),
        Command::Train { data, out } => match cfg.precision {
            Precision::F32 => train_as::<f32>(cfg, data, out),
            Precision::F64 => train_as::<f64>(cfg, data, out),
        },
        Command::AdaptEval {
            data,
            checkpoint,
            out,
            ..
        } => match cfg.precision {
            Precision::F32 => adapt_eval_as::<f32>(cfg, data, checkpoint, out),
            Precision::F64 => adapt_eval_as::<f64>(cfg, data, checkpoint, out),
        },
        Command::Report { out, results } => {
            let mut all = Vec::new();
            for p in results {
                all.extend(read_results(p)?);
            }
            write_report(&all, out)?;
            print!("{}", crate::eval::summary_table(&all));
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match cli.config() {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return 1;
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            2
        }
    }
}
