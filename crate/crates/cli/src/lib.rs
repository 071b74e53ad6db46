//! `ppgwarn` command line: configuration, artifact handling and the stage
//! runner behind the binary.

pub mod artifacts;
pub mod config;
pub mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};

use crate::config::PipelineConfig;
use crate::stages::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Synth,
    ParseNotes,
    Extract,
    Label,
    Select,
    Train,
    Eval,
    Attribute,
    Report,
    RunAll,
}

impl Stage {
    pub const PIPELINE: [Stage; 9] = [
        Stage::Synth,
        Stage::ParseNotes,
        Stage::Extract,
        Stage::Label,
        Stage::Select,
        Stage::Train,
        Stage::Eval,
        Stage::Attribute,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::ParseNotes => "parse-notes",
            Stage::Extract => "extract",
            Stage::Label => "label",
            Stage::Select => "select",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Attribute => "attribute",
            Stage::Report => "report",
            Stage::RunAll => "run-all",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ppgwarn",
    version,
    about = "Stroke early-warning pipeline over PPG waveforms"
)]
pub struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    pub stage: Stage,
    /// Pipeline configuration (JSON).
    #[arg(long, env = "PPGWARN_CONFIG")]
    pub config: PathBuf,
    /// Warning-window lengths in minutes; replaces `labeling.windows`.
    #[arg(long = "window", env = "PPGWARN_WINDOWS", value_delimiter = ',')]
    pub windows: Vec<u32>,
    /// Override the configured seed.
    #[arg(long, env = "PPGWARN_SEED")]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, env = "PPGWARN_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "PPGWARN_JOBS")]
    pub jobs: Option<usize>,
    /// More logging; repeat for trace.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl Cli {
    /// The file configuration with flag and environment overrides applied.
    pub fn effective_config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if !self.windows.is_empty() {
            cfg.labeling.windows = self.windows.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = o.clone();
        }
        Ok(cfg)
    }
}

pub fn run_stage(ctx: &Ctx, stage: Stage) -> Result<()> {
    let r = match stage {
        Stage::Synth => stages::synth(ctx),
        Stage::ParseNotes => stages::parse_notes(ctx),
        Stage::Extract => stages::extract(ctx),
        Stage::Label => stages::label(ctx),
        Stage::Select => stages::select(ctx),
        Stage::Train => stages::train(ctx),
        Stage::Eval => stages::eval(ctx),
        Stage::Attribute => stages::attribute(ctx),
        Stage::Report => stages::report(ctx),
        Stage::RunAll => return run_all(ctx),
    };
    r.with_context(|| format!("stage `{}` failed", stage.name()))
}

/// Every stage in order; `synth` only when the config has a `synth` section.
pub fn run_all(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.synth.is_none() {
        for p in [ctx.cfg.waveforms_dir(), ctx.cfg.notes_path()] {
            if !p.exists() {
                anyhow::bail!("no `synth` section and input {} does not exist", p.display());
            }
        }
    }
    for stage in Stage::PIPELINE {
        if stage == Stage::Synth && ctx.cfg.synth.is_none() {
            continue;
        }
        log::info!("running {}", stage.name());
        run_stage(ctx, stage)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Ctx::new(cli.effective_config()?)?;
    std::fs::create_dir_all(&ctx.cfg.paths.out).with_context(|| format!("creating {}", ctx.cfg.paths.out.display()))?;
    run_stage(&ctx, cli.stage)
}
