//! Command-line entry point. Every stage reads and writes files so each can be
//! rerun or inspected on its own.

pub mod config;
mod commands;
pub mod gradcheck;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::CoraError;

pub use commands::run_command;
pub use config::{DataConfig, RunConfig};
pub use gradcheck::{pipeline_gradcheck, GRADCHECK_TOLERANCE};
pub use pipeline::{build_vocab, fit_cf, fit_lm, Prepared, Stack};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_CONTAMINATION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cora", version, about = "Collaborative low-rank weight generation for a frozen language model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
    /// Raw arguments, recorded in run manifests.
    #[arg(skip)]
    pub argv: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the small synthetic-scale preset instead of the defaults.
    #[arg(long, global = true)]
    pub desk: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered dataset.
    GenData {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a collaborative-filtering model and export its embeddings.
    TrainCf {
        /// mf, lightgcn or sasrec.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-export embeddings from a trained CF checkpoint.
    ExportEmb {
        /// Output directory of `train-cf`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain and freeze the language model on titled training prompts.
    PretrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator against frozen embeddings and language model.
    TrainCora {
        #[arg(long)]
        cf_emb: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Targeted weights, e.g. qkvo.
        #[arg(long)]
        targets: Option<String>,
        /// per-type or per-layer.
        #[arg(long)]
        sharing: Option<String>,
        /// Replace every title with a placeholder.
        #[arg(long)]
        id_only: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with a trained generator.
    Eval {
        /// Output directory of `train-cora`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// all, warm or cold.
        #[arg(long, default_value = "all")]
        split: String,
        /// Write per-position logits of the first test prompt as CSV.
        #[arg(long)]
        dump_logits: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare several variants over several seeds.
    Ablate {
        /// Comma-separated: target sets (qkvo), text-only, id-only[:targets].
        #[arg(long, default_value = "qkvof,qkvo,qkv,qko,qk")]
        variants: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        cf_emb: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the whole differentiable pipeline.
    Gradcheck,
}

/// Process exit code for an error.
pub fn exit_code(e: &CoraError) -> i32 {
    match e {
        CoraError::Config(_) | CoraError::Length { .. } | CoraError::Injection(_) => EXIT_USAGE,
        CoraError::Training { .. } | CoraError::NonFinite(_) => EXIT_TRAINING,
        CoraError::Contamination(_) => EXIT_CONTAMINATION,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let mut cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    cli.argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run_command(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
