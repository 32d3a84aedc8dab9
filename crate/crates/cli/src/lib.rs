//! Front end for the attention kernels: correctness suites, timing sweeps,
//! MQAR training runs and mask dumps, each writing JSON and CSV.

pub mod args;
pub mod bench;
pub mod mask_dump;
pub mod mqar;
pub mod output;
pub mod verify;

use std::path::PathBuf;

use dma_core::{DType, DmaError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DmaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOpts {
    pub seed: u64,
    pub threads: Option<usize>,
    pub dtype: DType,
    pub out: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

impl Default for GlobalOpts {
    fn default() -> Self {
        Self { seed: 0, threads: None, dtype: DType::F64, out: None, config: None }
    }
}

impl GlobalOpts {
    /// Parses `--config` into `T`, or returns `T::default()` when absent.
    pub fn load_config<T: serde::de::DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(path) => Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?),
            None => Ok(T::default()),
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (the global pool when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}
