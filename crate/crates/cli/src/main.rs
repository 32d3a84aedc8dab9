use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use dma_cli::args::{Cli, Command};
use dma_cli::bench::{run_bench, BenchConfig, BenchRow};
use dma_cli::mask_dump::{parse_tokens, run_mask_dump};
use dma_cli::mqar::{run_eval, run_train, MqarRunConfig};
use dma_cli::output::{in_dir, to_json, write_json, write_records, write_text};
use dma_cli::verify::{run_verify, VerifyConfig};
use dma_cli::{with_threads, CliError, GlobalOpts, Result};
use dma_core::mqar::ModelConfig;
use dma_core::DType;

fn out_dir(g: &GlobalOpts, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn require_f64(g: &GlobalOpts, what: &str) -> Result<()> {
    if g.dtype != DType::F64 {
        return Err(CliError::Usage(format!("{what} runs in f64 only")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let g = cli.globals();
    match &cli.command {
        Command::Verify { inject_fault, suites } => {
            let mut cfg: VerifyConfig = g.load_config()?;
            cfg.inject_fault |= inject_fault;
            if !suites.is_empty() {
                cfg.suites = suites.clone();
            }
            let report = with_threads(g.threads, || run_verify(&cfg, g.seed, g.dtype))??;
            let text = to_json(&report)?;
            match &g.out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
            for s in &report.suites {
                eprintln!("{:<20} {} (max error {:e})", s.name, if s.passed { "ok" } else { "FAILED" }, s.max_error);
                for f in &s.failures {
                    eprintln!("  case {} seed {}: {}", f.case, f.seed, f.detail);
                }
            }
            Ok(report.passed)
        }
        Command::Bench => {
            let mut cfg: BenchConfig = g.load_config()?;
            if cli.dtype_given() {
                cfg.cases.iter_mut().for_each(|c| c.dtype = g.dtype);
            }
            let report = run_bench(&cfg, g.seed, g.threads)?;
            let dir = out_dir(&g, "bench_out");
            write_json(&dir.join("bench.json"), &report)?;
            let rows: Vec<BenchRow> = report.results.iter().map(BenchRow::from).collect();
            write_records(&dir.join("bench.csv"), &rows)?;
            for r in &rows {
                eprintln!(
                    "q={} k={} d={} w={} threads={} dense={:?}ms sparse={:?}ms speedup={:?} skipped={:.3} valid={}",
                    r.q_len, r.k_len, r.d_h, r.w, r.threads, r.dense_ms, r.sparse_ms, r.speedup,
                    r.blocks_skipped_fraction, r.valid
                );
            }
            Ok(rows.iter().all(|r| r.valid))
        }
        Command::MqarTrain => {
            require_f64(&g, "mqar-train")?;
            let cfg: MqarRunConfig = g.load_config()?;
            let dir = out_dir(&g, "mqar_out");
            let report = with_threads(g.threads, || run_train(&cfg, g.seed, &dir))??;
            eprintln!(
                "epochs {} test accuracy {:.4} (target reached: {})",
                report.epochs_run, report.final_test.accuracy, report.reached_target
            );
            if let Some(b) = &report.baseline {
                eprintln!(
                    "queries from position {}: dma {:.4}, {:?} {:.4}",
                    b.planted_min_query_pos, b.dma_planted.accuracy, b.mask, b.planted.accuracy
                );
            }
            Ok(true)
        }
        Command::MqarEval { checkpoint, dataset } => {
            require_f64(&g, "mqar-eval")?;
            let cfg: MqarRunConfig = g.load_config()?;
            let spec = cfg.seeded(g.seed).spec;
            let report = with_threads(g.threads, || run_eval(checkpoint, dataset.as_deref(), &spec, g.out.as_deref()))??;
            eprintln!("accuracy {:.4} over {} queries", report.eval.accuracy, report.eval.queries);
            eprintln!("wrote {}", in_dir(g.out.as_deref(), "eval.json").display());
            Ok(true)
        }
        Command::MaskDump { checkpoint, tokens } => {
            require_f64(&g, "mask-dump")?;
            let model_cfg: Option<ModelConfig> = match &g.config {
                Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let tokens = tokens.as_deref().map(parse_tokens).transpose()?;
            let dir = out_dir(&g, "mask_dump");
            let report = run_mask_dump(checkpoint.as_deref(), model_cfg, tokens, g.seed, &dir)?;
            for l in &report.layers {
                eprintln!("layer {}: {} distinct head masks", l.layer, l.distinct_head_masks);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
