//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "hdmoe", version, about = "Two-level sparse MoE survival prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (manifest, feature files, ground truth).
    Synth,
    /// Cross-validate and write checkpoints, logs, predictions and metrics.
    Train,
    /// Re-evaluate saved checkpoints.
    Eval(CheckpointArg),
    /// Expert histograms and shared-expert redundancy heatmaps.
    Analyze(CheckpointArg),
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Directory of `fold_<k>.json` files [default: <out>/checkpoints]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Flags layered over the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON config; its keys override the preset
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the 8x down-scaled preset
    #[arg(long, global = true)]
    pub desk: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Stability repeats at evaluation
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Fixed segment length at evaluation
    #[arg(long, global = true)]
    pub pin_segment: Option<usize>,
    #[arg(long, global = true)]
    pub parallel_folds: Option<usize>,
    /// Cohort size for `synth`
    #[arg(long, global = true)]
    pub cohort: Option<usize>,
    /// default | complementary | high_redundancy
    #[arg(long, global = true)]
    pub cohort_kind: Option<String>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = if self.desk { RunConfig::desk() } else { RunConfig::paper() };
        let mut c = match &self.config {
            Some(p) => RunConfig::load(&base, p)?,
            None => base,
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.out_dir = v.clone();
        }
        if let Some(v) = &self.manifest {
            c.manifest = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.repeats {
            c.repeats = v;
        }
        if let Some(v) = self.pin_segment {
            c.pin_segment = Some(v);
        }
        if let Some(v) = self.parallel_folds {
            c.parallel_folds = v;
        }
        if let Some(v) = self.cohort {
            c.cohort = v;
        }
        if let Some(v) = &self.cohort_kind {
            c.cohort_kind = v.clone();
        }
        Ok(c)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let ck = |a: &CheckpointArg| a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoints"));
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg).map(|e| commands::print_evaluation(&e)),
        Command::Eval(a) => commands::eval(&cfg, &ck(a)).map(|e| commands::print_evaluation(&e)),
        Command::Analyze(a) => {
            for (fold, block, r) in commands::analyze(&cfg, &ck(a))? {
                println!("fold {fold} {}: redundancy delta {:.4}", block.name(), r.delta);
            }
            Ok(())
        }
    }
}
