//! The `prectr` command line: corpus generation, encoder training, index
//! building, ranking-model training, evaluation, sweeps and batch ranking.
//!
//! Every command writes its artifacts, a `config.resolved` and a
//! `manifest.txt` under one `--out-dir`. Exit codes are 0 on success, 1 for
//! validation errors (bad flags, bad config, refused output directory) and
//! 2 for everything else.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use prectr::{Error, Result};

use crate::config::{parse_set, read_config_file, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "prectr", version, about = "Relevance-aware CTR ranking pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory for every artifact of this run.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overwrite into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gamma=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Ablation switches shared by `train` and `sweep`.
#[derive(Debug, Args, Clone, Copy, Default)]
pub struct VariantFlags {
    /// Skip Stage 1; the RSL module trains at the base rate.
    #[arg(long)]
    pub no_two_stage: bool,
    /// Leave out the consistency regularizer (gamma = 0).
    #[arg(long)]
    pub no_regularizer: bool,
    /// Fix the incentive at 1 and freeze the attention parameters.
    #[arg(long)]
    pub no_prim: bool,
    /// Single-head click model over the sparse fields, no fusion.
    #[arg(long)]
    pub base_only: bool,
    /// Add a linear term from the relevance flags to the Base logits.
    #[arg(long)]
    pub wide: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its 78/11/11 sequential split.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_impressions: Option<usize>,
    },
    /// Train the text encoder or build the embedding index.
    Encoder {
        #[command(subcommand)]
        command: EncoderCommand,
    },
    /// Train one ranking model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Encoder for texts missing from the index.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Compare trained models on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `name=path`, repeatable. RelaImpr is measured against the first.
        #[arg(long = "checkpoint", value_name = "NAME=PATH", required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train and evaluate once per value of alpha or gamma (beta fixed at 1).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["alpha", "gamma"])]
        param: String,
        /// Comma-separated, non-decreasing.
        #[arg(long)]
        values: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Score and order candidate items for one query and user.
    Rank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        query: String,
        /// First line `user_id<TAB>n`, then n `query<TAB>item_text` lines, most recent first.
        #[arg(long)]
        user_context: PathBuf,
        /// Header `item_id<TAB>item_text`, one candidate per line.
        #[arg(long)]
        candidates: PathBuf,
        /// Print each candidate's score breakdown instead of the bare score.
        #[arg(long)]
        explain: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum EncoderCommand {
    /// Relatedness pretraining on (query, item, clicked) pairs.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Relevance-level fine-tuning of a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Embed every text and pair in the given datasets.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
}

impl Common {
    /// Preset, then config file, then `--set`, then `--seed`.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            pairs.extend(read_config_file(path)?);
        }
        for s in &self.sets {
            pairs.push(parse_set(s)?);
        }
        let mut cfg = RunConfig::default();
        cfg.apply(&pairs)?;
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok(cfg)
    }
}

impl VariantFlags {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if self.base_only && (self.no_prim || self.no_two_stage || self.wide) {
            return Err(Error::Validation(
                "--base-only cannot be combined with --no-prim, --no-two-stage or --wide".into(),
            ));
        }
        if self.no_two_stage {
            cfg.train.two_stage = false;
        }
        if self.no_regularizer {
            cfg.train.use_regularizer = false;
        }
        if self.no_prim {
            cfg.model.use_prim = false;
        }
        if self.base_only {
            cfg.model.base_only = true;
        }
        if self.wide {
            cfg.model.wide = true;
        }
        Ok(())
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
