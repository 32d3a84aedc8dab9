//! `mqar-train` and `mqar-eval`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use dma_core::mqar::{
    evaluate, generate_mqar, load_checkpoint, save_checkpoint, train, EpochLog, EvalReport, ModelConfig,
    MqarDataset, MqarSpec, OptimizerKind, TinyModel, TrainConfig,
};
use dma_core::MaskKind;
use serde::{Deserialize, Serialize};

use crate::output::{in_dir, write_json};
use crate::Result;

/// Paired run against a static-mask model on queries far from their pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub mask: MaskKind,
    /// Queries of the comparison set start at this position.
    pub planted_min_query_pos: usize,
    pub planted_test: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { mask: MaskKind::SlidingWindow, planted_min_query_pos: 32, planted_test: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MqarRunConfig {
    pub spec: MqarSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baseline: Option<BaselineConfig>,
    /// Also write the generated dataset as JSONL.
    pub save_dataset: bool,
}

impl Default for MqarRunConfig {
    fn default() -> Self {
        let spec = MqarSpec { num_train: 1024, ..MqarSpec::small(0) };
        let model = ModelConfig::small(spec.vocab_size, MaskKind::Dynamic);
        let train = TrainConfig {
            batch_size: 16,
            optimizer: OptimizerKind::AdamwLite,
            clip_norm: Some(1.0),
            target_accuracy: Some(0.95),
            ..TrainConfig::new(200, 3e-3)
        };
        Self { spec, model, train, baseline: Some(BaselineConfig::default()), save_dataset: false }
    }
}

impl MqarRunConfig {
    /// Pins the data, initialization and shuffle seeds to `seed`.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub mask: MaskKind,
    pub planted_min_query_pos: usize,
    pub epochs: usize,
    pub test: EvalReport,
    pub planted: EvalReport,
    pub dma_planted: EvalReport,
    pub dma_at_least_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqarTrainReport {
    pub command: String,
    pub seed: u64,
    pub config: MqarRunConfig,
    pub num_params: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub steps: usize,
    pub final_test: EvalReport,
    pub reached_target: bool,
    pub baseline: Option<BaselineReport>,
}

fn write_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in epochs {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Trains the model (and the optional baseline), writes the report, logs and
/// checkpoint into `out`, and returns the report.
pub fn run_train(cfg: &MqarRunConfig, seed: u64, out: &Path) -> Result<MqarTrainReport> {
    let cfg = cfg.clone().seeded(seed);
    std::fs::create_dir_all(out)?;
    let data = generate_mqar(&cfg.spec)?;
    if cfg.save_dataset {
        data.write_jsonl(BufWriter::new(File::create(out.join("dataset.jsonl"))?))?;
    }
    let mut model = TinyModel::new(cfg.model.clone(), seed)?;
    let log = train(&mut model, &data, &cfg.train)?;
    write_log(&out.join("train_log.jsonl"), &log.epochs)?;
    save_checkpoint(out.join("model.ckpt"), &model, seed)?;
    let final_test = evaluate(&model, &data.test)?;
    let reached_target = cfg.train.target_accuracy.is_none_or(|t| final_test.accuracy >= t);

    let baseline = match &cfg.baseline {
        Some(b) => {
            let planted_spec = MqarSpec {
                num_train: 0,
                num_test: b.planted_test,
                min_query_pos: Some(b.planted_min_query_pos),
                seed: seed.wrapping_add(1),
                ..cfg.spec.clone()
            };
            let planted = generate_mqar(&planted_spec)?;
            let mut other = TinyModel::new(ModelConfig { mask: b.mask, ..cfg.model.clone() }, seed)?;
            let epochs = log.epochs.len();
            let b_train = TrainConfig { epochs, target_accuracy: None, ..cfg.train.clone() };
            let b_log = train(&mut other, &data, &b_train)?;
            write_log(&out.join("baseline_log.jsonl"), &b_log.epochs)?;
            let dma_planted = evaluate(&model, &planted.test)?;
            let base_planted = evaluate(&other, &planted.test)?;
            Some(BaselineReport {
                mask: b.mask,
                planted_min_query_pos: b.planted_min_query_pos,
                epochs,
                test: evaluate(&other, &data.test)?,
                dma_at_least_baseline: dma_planted.accuracy >= base_planted.accuracy,
                planted: base_planted,
                dma_planted,
            })
        }
        None => None,
    };

    let report = MqarTrainReport {
        command: "mqar-train".into(),
        seed,
        num_params: model.num_params(),
        epochs_run: log.epochs.len(),
        stopped_early: log.stopped_early,
        steps: log.steps,
        final_test,
        reached_target,
        baseline,
        config: cfg,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqarEvalReport {
    pub command: String,
    pub checkpoint_seed: u64,
    pub split: String,
    pub eval: EvalReport,
}

/// Evaluates a checkpoint on a dataset file, or on the test split of
/// `spec` when no file is given.
pub fn run_eval(checkpoint: &Path, dataset: Option<&Path>, spec: &MqarSpec, out: Option<&Path>) -> Result<MqarEvalReport> {
    let (model, header) = load_checkpoint(checkpoint)?;
    let (data, split) = match dataset {
        Some(p) => (MqarDataset::read_jsonl(BufReader::new(File::open(p)?))?, "file:test"),
        None => (generate_mqar(spec)?, "generated:test"),
    };
    let report = MqarEvalReport {
        command: "mqar-eval".into(),
        checkpoint_seed: header.seed,
        split: split.into(),
        eval: evaluate(&model, &data.test)?,
    };
    write_json(&in_dir(out, "eval.json"), &report)?;
    Ok(report)
}
