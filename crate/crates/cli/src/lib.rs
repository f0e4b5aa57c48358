//! Command-line front end for the bellnet experiments.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::ExperimentConfig;
use crate::output::Artifacts;

pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "bellnet", version, about = "Held-action Bellman operators and residual operator networks")]
pub struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; artifacts go to `<out-dir>/<command>/`.
    #[arg(long, global = true, env = "BELLNET_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value iteration from Q = 0 with regularity and fixed-point diagnostics.
    ValueIterate,
    /// Two iterations of the built-in appendix problem against closed forms.
    ReproduceAppendix,
    /// Train one operator block and report its metrics.
    TrainOperator,
    /// Build the residual stack and check the error bounds.
    VerifyTheorem {
        /// Use exact Bellman blocks instead of trained ones.
        #[arg(long, conflicts_with = "shared_block")]
        oracle_blocks: bool,
        /// Share one trained block across all layers.
        #[arg(long)]
        shared_block: bool,
    },
    /// Empirical contraction ratios on random pairs.
    VerifyContraction,
    /// Probe the declared regularity constants.
    AuditSpec,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ValueIterate => "value-iterate",
            Command::ReproduceAppendix => "reproduce-appendix",
            Command::TrainOperator => "train-operator",
            Command::VerifyTheorem { .. } => "verify-theorem",
            Command::VerifyContraction => "verify-contraction",
            Command::AuditSpec => "audit-spec",
        }
    }
}

/// Output root: flag (or `BELLNET_OUT_DIR`) > config `out_dir` > `runs`.
fn out_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out_dir.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| Path::new(DEFAULT_OUT_DIR).into())
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::VerifyTheorem { oracle_blocks, shared_block } = cli.command {
        commands::apply_block_flags(&mut cfg, oracle_blocks, shared_block);
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let name = cli.command.name();
    let dir = out_root(cli, &cfg).join(name);
    let mut out = Artifacts::create(&dir, name, cfg.hash())?;
    log::info!("{name}: writing to {}", dir.display());
    match cli.command {
        Command::ValueIterate => commands::value_iterate(&cfg, &mut out),
        Command::ReproduceAppendix => commands::reproduce_appendix(&mut out),
        Command::TrainOperator => commands::train_operator(&cfg, &mut out),
        Command::VerifyTheorem { .. } => commands::verify_theorem(&cfg, &mut out),
        Command::VerifyContraction => commands::verify_contraction(&cfg, &mut out),
        Command::AuditSpec => commands::audit_spec(&cfg, &mut out),
    }
}
