//! End-to-end runs of the `dma` binary: exit codes, report schemas and CSV
//! layout.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dma")).args(args).output().expect("binary runs")
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).expect("schema compiles")
}

fn assert_valid(name: &str, doc: &Value) {
    let v = schema(name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_MQAR: &str = r#"{
  "spec": {"vocab_size": 32, "num_pairs": 2, "seq_len": 16, "num_train": 32, "num_test": 16,
           "noise_fill": false, "seed": 0},
  "model": {"vocab_size": 32, "d_model": 16, "n_heads": 2, "n_layers": 1, "window": 8,
            "mlp_hidden": 8, "tied_head": false, "mask": "dynamic"},
  "train": {"epochs": 2, "lr": 0.003},
  "baseline": {"planted_min_query_pos": 8, "planted_test": 8},
  "save_dataset": true
}"#;

#[test]
fn verify_report_matches_schema() {
    let out = dma(&["verify", "--suite", "decode", "--suite", "mask_invariants"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("verify", &doc);
    assert_eq!(doc["suites"].as_array().unwrap().len(), 2);
}

#[test]
fn injected_fault_fails_with_named_invariant() {
    let out = dma(&["verify", "--suite", "mask_invariants", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("verify", &doc);
    assert_eq!(doc["passed"], Value::Bool(false));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask.active_count"));
}

#[test]
fn verify_is_identical_across_thread_counts() {
    let a = dma(&["verify", "--suite", "gradient", "--threads", "1"]);
    let b = dma(&["verify", "--suite", "gradient", "--threads", "3"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn bench_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.json");
    std::fs::write(
        &cfg,
        r#"{"cases": [{"n_h": 2, "q_len": 64, "k_len": 96, "d_h": 8, "w": 16, "repeats": 1, "warmup": 0},
                      {"n_h": 1, "q_len": 1, "k_len": 128, "d_h": 8, "w": 32, "layout": "clustered",
                       "dtype": "f32", "repeats": 1, "warmup": 0}]}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = dma(&["bench", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read_json(&out_dir.join("bench.json"));
    assert_valid("bench", &doc);

    let mut reader = csv::Reader::from_path(out_dir.join("bench.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    for col in ["q_len", "k_len", "w", "dense_ms", "sparse_ms", "speedup", "valid"] {
        assert!(header.iter().any(|h| h == col), "missing column {col}");
    }
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let valid = header.iter().position(|h| h == "valid").unwrap();
    assert!(rows.iter().all(|r| &r[valid] == "true"));
}

#[test]
fn mqar_train_eval_and_mask_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mqar.json");
    std::fs::write(&cfg, TINY_MQAR).unwrap();
    let train_dir = dir.path().join("train");
    let out = dma(&["mqar-train", "--config", cfg.to_str().unwrap(), "--out", train_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&train_dir.join("report.json"));
    assert_valid("mqar-train", &report);
    let log = std::fs::read_to_string(train_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        assert!(entry["test_accuracy"].is_number());
    }

    let ckpt = train_dir.join("model.ckpt");
    let dataset = train_dir.join("dataset.jsonl");
    let eval_dir = dir.path().join("eval");
    let out = dma(&[
        "mqar-eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = read_json(&eval_dir.join("eval.json"));
    assert_valid("mqar-eval", &eval);
    assert_eq!(eval["eval"], report["final_test"]);

    let dump_dir = dir.path().join("dump");
    let out = dma(&[
        "mask-dump",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tokens",
        "1,2,3,4,5,6,7,8,9,10,11,12",
        "--out",
        dump_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = read_json(&dump_dir.join("mask_dump.json"));
    assert_valid("mask-dump", &dump);
    assert_eq!(dump["files"].as_array().unwrap().len(), 4);

    let mut reader = csv::Reader::from_path(dump_dir.join("layer0_head1_probs.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 13);
    let kept = &dump["heads"][1]["kept"];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(rec[0].parse::<usize>().unwrap(), i);
        let row_kept: Vec<u64> = kept[i].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let mut total = 0.0;
        for j in 0..12 {
            let cell = &rec[j + 1];
            assert_eq!(!cell.is_empty(), row_kept.contains(&(j as u64)), "row {i} key {j}");
            if !cell.is_empty() {
                total += cell.parse::<f64>().unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mask_dump_of_random_model_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dma(&["mask-dump", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = read_json(&dir.path().join("mask_dump.json"));
    assert_valid("mask-dump", &dump);
    assert_eq!(dump["source"], Value::String("random:3".into()));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(dma(&["verify", "--dtype", "f16"]).status.code(), Some(2));
    assert_eq!(dma(&["mqar-train", "--dtype", "f32", "--out", "/nonexistent/x"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"cases": [{"n_h": 1, "q_len": 8, "k_len": 4, "d_h": 4, "w": 2}]}"#).unwrap();
    let out = dma(&["bench", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q_len"));
}
