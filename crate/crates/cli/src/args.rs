//! Command-line grammar.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dma_core::DType;

use crate::GlobalOpts;

#[derive(Debug, Parser)]
#[command(name = "dma", version, about = "Dynamic mask attention: verify, benchmark, train and inspect")]
pub struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Element type for kernels that support both.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub dtype: Option<String>,
    /// Output directory (or file, for single-report commands).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON file mirroring the command's config fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the correctness suites against the reference implementations.
    Verify {
        /// Flip one mask entry before the invariant checks.
        #[arg(long)]
        inject_fault: bool,
        /// Run only the named suites.
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
    /// Time the dense and block-skipping kernels.
    Bench,
    /// Train the MQAR model and its baseline.
    MqarTrain,
    /// Evaluate a checkpoint.
    MqarEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSONL; generated from the config when absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write per-head mask matrices as CSV.
    MaskDump {
        /// Trained model; random weights when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated probe tokens.
        #[arg(long)]
        tokens: Option<String>,
    },
}

impl Cli {
    pub fn globals(&self) -> GlobalOpts {
        GlobalOpts {
            seed: self.seed,
            threads: self.threads,
            dtype: self.dtype.as_deref().and_then(|s| s.parse().ok()).unwrap_or(DType::F64),
            out: self.out.clone(),
            config: self.config.clone(),
        }
    }

    pub fn dtype_given(&self) -> bool {
        self.dtype.is_some()
    }
}
