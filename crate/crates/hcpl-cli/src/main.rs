//! Pipeline operator surface: one binary, one subcommand per stage.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing or inconsistent
//! input, 4 numeric failure. `HCPL_LOG` controls stderr verbosity.

mod artifacts;
mod cmds;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hcpl_core::{HcplError, Result};

use crate::run::Ctx;

#[derive(Parser)]
#[command(name = "hcpl", version, about = "Single-cell protein localisation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Plain key/value config file with [section] headers.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; fully determines every stochastic choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 keeps runs strictly sequential.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with known ground truth.
    Synth,
    /// Segment probability maps into labelled cell instances.
    Segment { data: PathBuf },
    /// Train a localisation model on a dataset directory.
    Train { data: PathBuf },
    /// Replace weak positive labels with committee soft scores.
    Relabel { data: PathBuf },
    /// Run a trained model over a dataset and write predictions.
    Infer {
        model: PathBuf,
        data: PathBuf,
        /// Instance masks to crop cells from; defaults to data/masks.
        masks: Option<PathBuf>,
    },
    /// Combine prediction runs and weight cells by visual integrity.
    Ensemble {
        data: PathBuf,
        /// Instance masks matching the member runs; defaults to data/masks.
        masks: Option<PathBuf>,
    },
    /// Score detections against ground truth; prints per-class AP and mAP.
    Evaluate { detections: PathBuf, truth: PathBuf },
    /// Export class activation maps for selected cells.
    Cam { model: PathBuf, data: PathBuf },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Synth => "synth",
            Cmd::Segment { .. } => "segment",
            Cmd::Train { .. } => "train",
            Cmd::Relabel { .. } => "relabel",
            Cmd::Infer { .. } => "infer",
            Cmd::Ensemble { .. } => "ensemble",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::Cam { .. } => "cam",
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(HcplError::Config("--threads must be at least 1".into()));
    }
    // pool may already exist when set by the environment; that is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();

    let mut ctx = Ctx::new(
        cli.command.name(),
        cli.config.as_deref(),
        cli.seed,
        cli.threads,
        cli.out.as_deref(),
    )?;
    match &cli.command {
        Cmd::Synth => cmds::cmd_synth(&mut ctx)?,
        Cmd::Segment { data } => cmds::cmd_segment(&mut ctx, data)?,
        Cmd::Train { data } => cmds::cmd_train(&mut ctx, data)?,
        Cmd::Relabel { data } => cmds::cmd_relabel(&mut ctx, data)?,
        Cmd::Infer { model, data, masks } => {
            cmds::cmd_infer(&mut ctx, model, data, masks.as_deref())?
        }
        Cmd::Ensemble { data, masks } => cmds::cmd_ensemble(&mut ctx, data, masks.as_deref())?,
        Cmd::Evaluate { detections, truth } => cmds::cmd_evaluate(&mut ctx, detections, truth)?,
        Cmd::Cam { model, data } => cmds::cmd_cam(&mut ctx, model, data)?,
    }
    ctx.finish()
}

fn exit_for(err: &HcplError) -> u8 {
    match err {
        HcplError::Config(_) | HcplError::Parse { .. } => 2,
        HcplError::Input(_) | HcplError::Io { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HCPL_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
