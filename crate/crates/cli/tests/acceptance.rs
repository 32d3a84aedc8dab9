//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. `ACCEPTANCE_ONLY=1,7` restricts the run to a subset.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dma_cli::bench::{run_case, BenchCase};
use dma_cli::mask_dump::run_mask_dump;
use dma_cli::mqar::{run_train, MqarRunConfig};
use dma_cli::verify::{run_verify, SuiteReport, VerifyConfig};
use dma_core::DType;

const SEED: u64 = 0;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn suite(name: &str, dtype: DType) -> Result<SuiteReport, String> {
    let cfg = VerifyConfig { suites: vec![name.into()], ..VerifyConfig::default() };
    let report = run_verify(&cfg, SEED, dtype).map_err(|e| e.to_string())?;
    Ok(report.suites.into_iter().next().expect("one suite requested"))
}

fn suite_verdict(name: &str) -> Verdict {
    match suite(name, DType::F64) {
        Ok(s) => Verdict::new(
            s.passed,
            format!("{} cases, max error {:e} (tolerance {:e}){}", s.cases, s.max_error, s.tolerance, first_failure(&s)),
        ),
        Err(e) => Verdict::error(e),
    }
}

fn first_failure(s: &SuiteReport) -> String {
    s.failures.first().map(|f| format!("; first failure: {}", f.detail)).unwrap_or_default()
}

fn forward_equivalence() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut passed = true;
    for dtype in [DType::F64, DType::F32] {
        match suite("forward_equivalence", dtype) {
            Ok(s) => {
                passed &= s.passed;
                parts.push(format!("{dtype}: {} cases, max error {:e}{}", s.cases, s.max_error, first_failure(&s)));
            }
            Err(e) => return Verdict::error(e),
        }
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(60);
    Verdict::new(passed, format!("{}; {:.1}s", parts.join("; "), elapsed.as_secs_f64()))
}

fn sparse_speed() -> Verdict {
    let start = Instant::now();
    let mut sparse = BenchCase::new(1, 4096, 4096, 64, 256);
    sparse.threads = Some(4);
    sparse.repeats = 3;
    sparse.warmup = 1;
    let full = BenchCase { w: 4096, ..sparse.clone() };
    let (a, b) = match (run_case(&sparse, SEED, None), run_case(&full, SEED, None)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Verdict::error(e),
    };
    let elapsed = start.elapsed();
    let ratio = |r: &dma_cli::bench::BenchResult| r.sparse_ms.zip(r.dense_ms).map(|(s, d)| s / d);
    let (ra, rb) = (ratio(&a), ratio(&b));
    let passed = a.valid
        && b.valid
        && ra.is_some_and(|r| r <= 0.5)
        && rb.is_some_and(|r| r <= 1.3)
        && elapsed < Duration::from_secs(300);
    Verdict::new(
        passed,
        format!(
            "w=256: sparse/dense {:.3} ({:?} / {:?} ms), w=4096: sparse/dense {:.3}, checksums equal {}; {:.1}s",
            ra.unwrap_or(f64::NAN),
            a.sparse_ms.map(|x| x.round()),
            a.dense_ms.map(|x| x.round()),
            rb.unwrap_or(f64::NAN),
            a.valid && b.valid,
            elapsed.as_secs_f64()
        ),
    )
}

fn mqar(dir: &Path) -> Verdict {
    let start = Instant::now();
    let report = match run_train(&MqarRunConfig::default(), SEED, dir) {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let elapsed = start.elapsed();
    let Some(b) = &report.baseline else {
        return Verdict::new(false, "baseline missing");
    };
    let passed = report.final_test.accuracy >= 0.95
        && report.epochs_run <= 200
        && b.dma_at_least_baseline
        && elapsed < Duration::from_secs(900);
    Verdict::new(
        passed,
        format!(
            "test accuracy {:.4} after {} epochs; queries from position {}: dma {:.4} vs sliding window {:.4}; {:.1}s",
            report.final_test.accuracy,
            report.epochs_run,
            b.planted_min_query_pos,
            b.dma_planted.accuracy,
            b.planted.accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

fn dma(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dma")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("dma {} exited with {:?}", args.join(" "), out.status.code()))
    }
}

fn determinism(dir: &Path) -> Verdict {
    let short = r#"{"train": {"epochs": 2, "lr": 0.003, "batch_size": 16, "optimizer": "adamw-lite", "clip_norm": 1.0},
                    "spec": {"vocab_size": 64, "num_pairs": 8, "seq_len": 64, "num_train": 64, "num_test": 32,
                             "noise_fill": false, "seed": 0},
                    "baseline": null}"#;
    let cfg = dir.join("short.json");
    if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&cfg, short)) {
        return Verdict::error(e);
    }
    let cfg = cfg.to_str().unwrap();
    let runs = [("a", "1"), ("b", "4"), ("c", "4")];
    for (name, threads) in runs {
        let d = dir.join(name);
        let v = d.join("verify.json");
        let result = dma(&["verify", "--threads", threads, "--out", v.to_str().unwrap()])
            .and_then(|_| std::fs::create_dir_all(&d).map_err(|e| e.to_string()))
            .and_then(|_| dma(&["mqar-train", "--threads", threads, "--config", cfg, "--out", d.to_str().unwrap()]));
        if let Err(e) = result {
            return Verdict::error(e);
        }
    }
    let files = ["verify.json", "report.json", "train_log.jsonl", "model.ckpt"];
    let mut differing = Vec::new();
    for f in files {
        let read = |n: &str| std::fs::read(dir.join(n).join(f)).unwrap_or_default();
        let a = read("a");
        if a.is_empty() || a != read("b") || a != read("c") {
            differing.push(f);
        }
    }
    Verdict::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{files:?} identical over 3 runs at 1 and 4 threads")
        } else {
            format!("differ: {differing:?}")
        },
    )
}

fn distinct_heads(train_dir: &Path, dir: &Path) -> Verdict {
    let ckpt = train_dir.join("model.ckpt");
    if !ckpt.exists() {
        if let Err(e) = run_train(&MqarRunConfig::default(), SEED, train_dir) {
            return Verdict::error(e);
        }
    }
    match run_mask_dump(Some(&ckpt), None, None, SEED, dir) {
        Ok(r) => Verdict::new(
            r.heads_differ,
            format!(
                "distinct head masks per layer: {:?}",
                r.layers.iter().map(|l| l.distinct_head_masks).collect::<Vec<_>>()
            ),
        ),
        Err(e) => Verdict::error(e),
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let train_dir = tmp.path().join("mqar");

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "forward equivalence", Box::new(forward_equivalence)),
        (2, "finite-difference gradients", Box::new(|| suite_verdict("gradient"))),
        (3, "skip safety", Box::new(|| suite_verdict("skip_safety"))),
        (4, "mask invariants", Box::new(|| suite_verdict("mask_invariants"))),
        (5, "bias shift invariance", Box::new(|| suite_verdict("bias_invariance"))),
        (6, "decode equals batch", Box::new(|| suite_verdict("decode"))),
        (7, "block skipping speed", Box::new(sparse_speed)),
        (8, "MQAR", Box::new(|| mqar(&train_dir))),
        (9, "determinism", Box::new(|| determinism(&tmp.path().join("det")))),
        (10, "head diversity", Box::new(|| distinct_heads(&train_dir, &tmp.path().join("dump")))),
    ];

    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !selected(*n) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.passed);
        println!("criterion {n:>2} {:<28} {}  {}", name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
