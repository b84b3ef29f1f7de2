//! `token-boost`: run pre-training, probing, supervised training, ablations
//! and the theory checks; generate data; inspect checkpoints.
//!
//! Exit codes: 0 ok, 1 other failure, 2 usage, 3 verification failure,
//! 4 numeric failure. Failures print one line `error[<category>]: <msg>`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use token_boost::tensor::TensorError;
use token_boost::theory::TheoryError;
use token_boost::train::TrainError;

#[derive(Parser)]
#[command(name = "token-boost", version, about = "Token boosting experiments on a toy masked-autoencoder ViT")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed (overrides `seeds`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $TOKEN_BOOST_OUT, then the config's `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Corruption kinds, comma separated, or `all`.
    #[arg(long)]
    pub corruptions: Option<String>,
    /// Training corruption severity: 1..=5 or `uniform`.
    #[arg(long)]
    pub severity: Option<String>,
    /// Probability that a training image is corrupted.
    #[arg(long)]
    pub apply_prob: Option<f64>,
    /// Disable data parallelism.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-autoencoder pre-training, one run per seed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint of an existing run.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs as if interrupted (testing aid).
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Linear probe on a frozen pre-trained encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// End-to-end supervised training, one run per seed.
    Supervised {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train + probe across TBM placements and λ values.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Subset of cells to run (default: all).
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
    },
    /// Monte-Carlo and training checks of the boosting theory.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo samples per check (accepts `1e6`).
        #[arg(long, default_value = "1e6")]
        samples: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 16000)]
        alpha_steps: usize,
        /// Skip the reported-only diagnostics.
        #[arg(long)]
        no_diagnostics: bool,
    },
    /// Generate and save the train / test splits (and a corrupted test copy).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Print a checkpoint's metadata and tensor names / shapes.
    InspectCkpt {
        path: PathBuf,
        /// Include optimizer moment tensors.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        json: bool,
    },
}

/// Wrong or inconsistent arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// A verification suite ran but did not pass.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct VerificationFailed(pub String);

fn is_numeric(e: &anyhow::Error) -> bool {
    let tensor = |t: &TensorError| matches!(t, TensorError::NonFinite { .. } | TensorError::NanGradient { .. });
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return match t {
            TrainError::NonFinite { .. } => true,
            TrainError::Tensor(x) => tensor(x),
            _ => false,
        };
    }
    if let Some(t) = e.downcast_ref::<TheoryError>() {
        return match t {
            TheoryError::Diverged { .. } => true,
            TheoryError::Tensor(x) => tensor(x),
            _ => false,
        };
    }
    e.downcast_ref::<TensorError>().is_some_and(tensor)
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_))) {
        ("usage", 2)
    } else if e.downcast_ref::<VerificationFailed>().is_some() {
        ("verification", 3)
    } else if is_numeric(e) {
        ("numeric", 4)
    } else if e.downcast_ref::<std::io::Error>().is_some() || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Io(_))) {
        ("io", 1)
    } else {
        ("runtime", 1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Command::Pretrain { common, resume, halt_after } => commands::pretrain(&common, resume, halt_after),
        Command::Probe { common, ckpt } => commands::probe(&common, &ckpt),
        Command::Supervised { common } => commands::supervised(&common),
        Command::Ablate { common, cells } => commands::ablate(&common, &cells),
        Command::VerifyTheory {
            common,
            samples,
            bins,
            alpha_steps,
            no_diagnostics,
        } => commands::verify_theory(&common, &samples, bins, alpha_steps, !no_diagnostics),
        Command::GenData { common } => commands::gen_data(&common),
        Command::InspectCkpt { path, all, json } => commands::inspect_ckpt(&path, all, json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (cat, code) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{cat}]: {msg}");
            ExitCode::from(code)
        }
    }
}
