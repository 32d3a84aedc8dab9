//! Dense vs block-skipping kernel timings.
//!
//! Each case builds one set of inputs and one mask, then times the kernel with
//! skipping on and off: `warmup` untimed runs, `repeats` timed runs, median
//! reported. A timing is only emitted when both paths produce the same
//! output checksum.

use std::time::Instant;

use dma_core::attention::{attend, KernelOptions};
use dma_core::mask::build_mask;
use dma_core::{DType, DmaConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{with_threads, CliError, Result};

/// How the dynamic weights are laid out along the key axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightLayout {
    /// Independent weight per key.
    #[default]
    Random,
    /// One weight per run of `block` keys, so kept keys fill whole tiles.
    Clustered,
}

fn one() -> usize {
    1
}

fn sixteen() -> usize {
    16
}

fn five() -> usize {
    5
}

fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    #[serde(default = "one")]
    pub batch: usize,
    pub n_h: usize,
    /// Must equal `n_h`; grouped keys are not supported.
    #[serde(default)]
    pub kv_heads: Option<usize>,
    pub q_len: usize,
    pub k_len: usize,
    pub d_h: usize,
    pub w: usize,
    #[serde(default)]
    pub dtype: DType,
    /// Worker threads; the global `--threads` value when absent.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "five")]
    pub repeats: usize,
    #[serde(default = "two")]
    pub warmup: usize,
    #[serde(default = "sixteen")]
    pub block: usize,
    #[serde(default)]
    pub layout: WeightLayout,
}

impl BenchCase {
    pub fn new(n_h: usize, q_len: usize, k_len: usize, d_h: usize, w: usize) -> Self {
        Self {
            batch: 1,
            n_h,
            kv_heads: None,
            q_len,
            k_len,
            d_h,
            w,
            dtype: DType::F64,
            threads: None,
            repeats: 5,
            warmup: 2,
            block: 16,
            layout: WeightLayout::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.kv_heads.is_some_and(|k| k != self.n_h) {
            return bad("kv_heads must equal n_h".into());
        }
        if self.batch == 0 || self.n_h == 0 || self.d_h == 0 || self.w == 0 || self.block == 0 {
            return bad("batch, n_h, d_h, w and block must be positive".into());
        }
        if self.q_len == 0 || self.q_len > self.k_len {
            return bad(format!("need 0 < q_len <= k_len, got {} and {}", self.q_len, self.k_len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub cases: Vec<BenchCase>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut decode = BenchCase::new(1, 1, 65_536, 64, 2048);
        decode.layout = WeightLayout::Clustered;
        Self {
            cases: vec![
                BenchCase::new(1, 1024, 1024, 64, 64),
                BenchCase::new(1, 1024, 1024, 64, 1024),
                decode,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub case: BenchCase,
    pub threads: usize,
    /// Median wall-clock milliseconds; absent when the checksums differ.
    pub dense_ms: Option<f64>,
    pub sparse_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub blocks_skipped_fraction: f64,
    pub checksum_dense: f64,
    pub checksum_sparse: f64,
    pub valid: bool,
}

/// Flat CSV row, one per case.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub batch: usize,
    pub n_h: usize,
    pub kv_heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub d_h: usize,
    pub w: usize,
    pub block: usize,
    pub layout: String,
    pub dtype: String,
    pub threads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub dense_ms: Option<f64>,
    pub sparse_ms: Option<f64>,
    pub speedup: Option<f64>,
    pub blocks_skipped_fraction: f64,
    pub checksum_dense: f64,
    pub checksum_sparse: f64,
    pub valid: bool,
}

impl From<&BenchResult> for BenchRow {
    fn from(r: &BenchResult) -> Self {
        let c = &r.case;
        Self {
            batch: c.batch,
            n_h: c.n_h,
            kv_heads: c.kv_heads.unwrap_or(c.n_h),
            q_len: c.q_len,
            k_len: c.k_len,
            d_h: c.d_h,
            w: c.w,
            block: c.block,
            layout: format!("{:?}", c.layout).to_lowercase(),
            dtype: c.dtype.to_string(),
            threads: r.threads,
            repeats: c.repeats,
            warmup: c.warmup,
            dense_ms: r.dense_ms,
            sparse_ms: r.sparse_ms,
            speedup: r.speedup,
            blocks_skipped_fraction: r.blocks_skipped_fraction,
            checksum_dense: r.checksum_dense,
            checksum_sparse: r.checksum_sparse,
            valid: r.valid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub command: String,
    pub seed: u64,
    pub results: Vec<BenchResult>,
}

/// Inputs of one batch item, shared by both paths.
pub struct BenchInputs<S: Scalar> {
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    pub mask: dma_core::DynamicMask<S>,
}

pub fn make_inputs<S: Scalar>(case: &BenchCase, rng: &mut ChaCha8Rng) -> Result<BenchInputs<S>> {
    let (h, d) = (case.n_h, case.d_h);
    let mut uniform = |shape: [usize; 3]| Tensor::<S>::from_fn(shape, |_| S::from_f64(rng.random_range(-1.0..1.0)));
    let q = uniform([h, case.q_len, d]);
    let k = uniform([h, case.k_len, d]);
    let v = uniform([h, case.k_len, d]);
    let delta = match case.layout {
        WeightLayout::Random => Tensor::from_fn([h, case.k_len], |_| S::from_f64(rng.random_range(1.0..3.0))),
        WeightLayout::Clustered => {
            let runs = case.k_len.div_ceil(case.block);
            let levels: Vec<f64> = (0..h * runs).map(|_| rng.random_range(1.0..3.0)).collect();
            Tensor::from_fn([h, case.k_len], |idx| {
                let (hh, j) = (idx / case.k_len, idx % case.k_len);
                S::from_f64(levels[hh * runs + j / case.block])
            })
        }
    };
    let cfg = DmaConfig::new(h, d, case.w).with_blocks(case.block, case.block);
    let mask = build_mask(&delta, case.q_len, &cfg)?;
    Ok(BenchInputs { q, k, v, mask })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Runs both paths over the batch; returns (median ms, checksum, skipped fraction).
fn time_path<S: Scalar>(case: &BenchCase, inputs: &[BenchInputs<S>], skip: bool) -> Result<(f64, f64, f64)> {
    let opts = KernelOptions { skip_masked: skip, record: false };
    let run = || -> Result<(f64, f64)> {
        let (mut sum, mut skipped) = (0.0, 0.0);
        for x in inputs {
            let out = attend(&x.q, &x.k, &x.v, &x.mask, opts)?;
            sum += out.context.data().iter().map(|v| v.to_f64()).sum::<f64>();
            skipped += out.stats.skipped_fraction();
        }
        Ok((sum, skipped / inputs.len() as f64))
    };
    for _ in 0..case.warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(case.repeats);
    let mut last = (0.0, 0.0);
    for _ in 0..case.repeats {
        let start = Instant::now();
        last = run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), last.0, last.1))
}

fn run_typed<S: Scalar>(case: &BenchCase, seed: u64, threads: usize) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<BenchInputs<S>> =
        (0..case.batch).map(|_| make_inputs(case, &mut rng)).collect::<Result<_>>()?;
    let (dense_ms, checksum_dense, _) = time_path(case, &inputs, false)?;
    let (sparse_ms, checksum_sparse, skipped) = time_path(case, &inputs, true)?;
    let valid = checksum_dense.to_bits() == checksum_sparse.to_bits();
    let (dense_ms, sparse_ms) = if valid { (Some(dense_ms), Some(sparse_ms)) } else { (None, None) };
    Ok(BenchResult {
        case: case.clone(),
        threads,
        dense_ms,
        sparse_ms,
        speedup: dense_ms.zip(sparse_ms).map(|(d, s)| d / s),
        blocks_skipped_fraction: skipped,
        checksum_dense,
        checksum_sparse,
        valid,
    })
}

/// Runs one case on its own thread pool.
pub fn run_case(case: &BenchCase, seed: u64, default_threads: Option<usize>) -> Result<BenchResult> {
    case.validate()?;
    let threads = case.threads.or(default_threads);
    with_threads(threads, || {
        let n = rayon::current_num_threads();
        match case.dtype {
            DType::F64 => run_typed::<f64>(case, seed, n),
            DType::F32 => run_typed::<f32>(case, seed, n),
        }
    })?
}

/// Cases run one after another; case `i` uses seed `seed + i`.
pub fn run_bench(cfg: &BenchConfig, seed: u64, threads: Option<usize>) -> Result<BenchReport> {
    let results = cfg
        .cases
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, seed.wrapping_add(i as u64), threads))
        .collect::<Result<_>>()?;
    Ok(BenchReport { command: "bench".into(), seed, results })
}
