//! `tov`: pretraining, probing, diagnostics, gradient checks and synthetic
//! data generation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "tov", version, about = "ViT pretraining with VICReg and temporal order verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Pretrain an encoder on an OBSV store.
    Pretrain,
    /// Train and score linear probes for checkpoints × stores.
    Probe,
    /// Collapse diagnostics and representation exports for one checkpoint.
    Diagnose,
    /// Central-difference check of the full objective on a toy model.
    Gradcheck,
    /// Write a deterministic synthetic OBSV store.
    GenSynthetic,
    /// Print the encoder parameter count.
    ParamCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PosTable {
    Grid,
    #[value(name = "785")]
    Wide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum F1Flag {
    Macro,
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindFlag {
    Dots,
    Noise,
}

#[derive(clap::Args, Debug, Default)]
pub struct Flags {
    /// Flat `section.key = value` file, or a `resolved_config.json`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "TOV_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// OBSV store; repeat for several stores when probing.
    #[arg(long, global = true)]
    pub data: Vec<PathBuf>,
    /// Pretraining epochs, or probe epochs for `probe`.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Pretraining batch, probe batch for `probe`, check batch for `gradcheck`.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub pos_table: Option<PosTable>,
    #[arg(long, global = true)]
    pub cov_coef: Option<f64>,
    #[arg(long, global = true)]
    pub temp_coef: Option<f64>,
    #[arg(long, global = true)]
    pub sparsity_tol: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub f1: Option<F1Flag>,
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// Checkpoint file; repeat for several checkpoints when probing.
    #[arg(long, global = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindFlag>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub sample_n: Option<usize>,
    /// `checkpoint,score` CSV correlated against mean probe F1.
    #[arg(long, global = true)]
    pub scores: Option<PathBuf>,
    /// Per-parameter entry cap for `gradcheck` (all entries by default).
    #[arg(long, global = true)]
    pub max_coords: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tov: {e}");
            CliError::exit_code(&e)
        }
    }
}
